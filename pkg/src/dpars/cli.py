"""Command-line interface tying the pipeline together.

Subcommands: synth, train, eval, predict, info, sweep-encoding, sweep-lambda.
Flags mirror config-file keys one-to-one; when both are given the flag wins.
Exit codes: 0 success, 1 runtime/numerical failure, 2 usage/configuration
error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .dataset import (
    SPLITS,
    TEST,
    SyntheticConfig,
    load_dataset,
    read_emg_csv,
    synthesize,
    write_angles_csv,
    write_emg_csv,
)
from .errors import ConfigError, DataFormatError, DparsError, ProtocolError
from .evaluate import (
    encoding_size_sweep,
    evaluate_model,
    mac_count,
    prune_attractor_heads,
    sweep_csv_lines,
)
from .kvfile import read_kv
from .model import DparsConfig, StreamingState, param_count
from .modelfile import load_model, save_model
from .sigproc import PreprocessConfig, preprocess
from .train import TrainConfig, train_loop

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.0, 0.005, 0.02, 0.05, 0.2)

_FLAG_ALIASES = {"lam": "lambda"}


def _flag_name(field_name: str) -> str:
    return "--" + _FLAG_ALIASES.get(field_name, field_name).replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser, cls, group_name: str) -> None:
    group = parser.add_argument_group(f"{group_name} overrides")
    for f in fields(cls):
        if f.type not in ("int", "float", "str", "bool"):
            continue
        group.add_argument(_flag_name(f.name), dest=f"{cls.__name__}.{f.name}",
                           default=None, metavar=f.type.upper())


def _coerce(type_name: str, value: str):
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    if type_name == "bool":
        return value.lower() in ("1", "true", "yes")
    return value


def _build_config(cls, file_kv: dict, args: argparse.Namespace):
    """Config-file values overridden by any flags that were actually given."""
    merged = dict(file_kv)
    for f in fields(cls):
        flag_value = getattr(args, f"{cls.__name__}.{f.name}", None)
        if flag_value is not None:
            merged[_FLAG_ALIASES.get(f.name, f.name)] = flag_value
    return cls.from_kv(merged)


def _split_kv_by_schema(raw: dict) -> tuple[dict, dict, dict]:
    """Route a flat key space onto (preprocess, model, train) schemas."""
    pre_keys = {f.name for f in fields(PreprocessConfig)}
    model_keys = {f.name for f in fields(DparsConfig)}
    train_keys = {"learning_rate", "lambda", "batch_size", "epochs", "seed", "shuffle"}
    pre, model, train = {}, {}, {}
    for key, value in raw.items():
        if key in pre_keys:
            pre[key] = value
        elif key in model_keys:
            model[key] = value
        elif key in train_keys:
            train[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return pre, model, train


def _manifest_lines(command: str, args: argparse.Namespace, extra: Optional[dict] = None) -> list[str]:
    items = {"command": command, "tool_version": __version__}
    for key in ("config", "emg", "angles", "model", "out", "out_dir", "out_model", "report"):
        value = getattr(args, key, None)
        if value is not None:
            items[key] = value
    if extra:
        items.update(extra)
    stamp = os.environ.get("SOURCE_DATE_EPOCH", "")
    items["timestamp"] = stamp
    return [f"manifest {k} = {v}" for k, v in items.items()]


def _read_optional_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    if not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    return read_kv(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    if not Path(args.config).exists():
        raise ConfigError(f"config file not found: {args.config}")
    cfg = SyntheticConfig.from_kv(read_kv(args.config))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rec, angles = synthesize(cfg)
    manifest = _manifest_lines("synth", args, {"seed": cfg.seed})
    emg_path = out_dir / "emg.csv"
    angles_path = out_dir / "angles.csv"
    write_emg_csv(emg_path, rec, manifest)
    write_angles_csv(angles_path, angles, cfg.frame_rate_hz, manifest)
    print(f"wrote {emg_path} ({rec.samples.shape[0]} samples x {rec.channels} channels)")
    print(f"wrote {angles_path} ({angles.shape[0]} frames)")
    return 0


def _load_configs(args: argparse.Namespace) -> tuple[PreprocessConfig, DparsConfig, TrainConfig]:
    raw = _read_optional_config(getattr(args, "config", None))
    pre_kv, model_kv, train_kv = _split_kv_by_schema(raw)
    pre = _build_config(PreprocessConfig, pre_kv, args)
    model_cfg = _build_config(DparsConfig, model_kv, args)
    train_cfg = _build_config(TrainConfig, train_kv, args)
    return pre, model_cfg, train_cfg


def cmd_train(args: argparse.Namespace) -> int:
    pre, model_cfg, train_cfg = _load_configs(args)
    ds = load_dataset(args.emg, args.angles, pre, t_seq=model_cfg.t_seq)
    if ds.env_frames.shape[1] != model_cfg.c_in:
        raise ConfigError(
            f"data has {ds.env_frames.shape[1]} channels but the model expects {model_cfg.c_in}"
        )
    t0 = time.perf_counter()
    params, report = train_loop(ds, model_cfg, train_cfg)
    elapsed = time.perf_counter() - t0
    training_meta = {
        "seed": train_cfg.seed,
        "epochs": train_cfg.epochs,
        "lambda": train_cfg.lam,
        "learning_rate": train_cfg.learning_rate,
        "batch_size": train_cfg.batch_size,
        "best_epoch": report.best_epoch,
        "lr_halvings": report.lr_halvings,
        "learning_rate_used": report.learning_rate_used,
    }
    manifest = {"command": "train", "tool_version": __version__}
    if args.config:
        manifest["config"] = args.config
    manifest.update({"emg": args.emg, "angles": args.angles, "out_model": args.out_model,
                     "seed": train_cfg.seed,
                     "timestamp": os.environ.get("SOURCE_DATE_EPOCH", "")})
    save_model(args.out_model, params, ds.stats, pre, training_meta, manifest)
    if args.report:
        report.write_csv(args.report, _manifest_lines("train", args))
    best = report.epochs[report.best_epoch]
    metrics, _, _ = evaluate_model(params, ds, TEST)
    print(f"best epoch {report.best_epoch}: val_loss={best.val_loss:.4f} "
          f"val_r2={best.val_r2:.4f} test_r2={metrics.mean_r2:.4f}")
    print(f"trained in {elapsed:.1f} s; model written to {args.out_model}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    loaded = load_model(args.model)
    params = loaded.params
    cfg = params.config
    ds = load_dataset(args.emg, args.angles, loaded.chain, t_seq=cfg.t_seq, stats=loaded.stats)
    if ds.env_frames.shape[1] != cfg.c_in:
        raise ConfigError(
            f"data has {ds.env_frames.shape[1]} channels but the model expects {cfg.c_in}"
        )
    split = args.split
    metrics, entropy, _ = evaluate_model(params, ds, split, eps=args.eps)
    # supports come from validation data; cost compares dense vs pruned
    _, val_entropy, _ = evaluate_model(params, ds, "val", eps=args.eps)
    pruned_params, cost = prune_attractor_heads(params, val_entropy.supports)
    pruned_metrics, _, _ = evaluate_model(pruned_params, ds, split, eps=args.eps)
    print(f"[{split}] mean R^2 = {metrics.mean_r2:.4f} (per finger: "
          + " ".join(f"{v:.3f}" for v in metrics.r2) + ")")
    print(f"[{split}] mean entropy per finger: "
          + " ".join(f"{v:.3f}" for v in entropy.mean_entropy))
    print(f"[{split}] pruned mean R^2 = {pruned_metrics.mean_r2:.4f} "
          f"(supports: {[len(s) for s in val_entropy.supports]})")
    print(f"parameters total = {cost.params_total}")
    print(f"MACs/prediction dense = {cost.macs_total}, pruned = {cost.pruned_macs_total} "
          f"(attractor output stage ratio {cost.ratios['attractor_output_mac_ratio']:.2f}x)")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text("\n".join(metrics.csv_lines()) + "\n", encoding="utf-8")
        (out / "entropy.csv").write_text("\n".join(entropy.csv_lines()) + "\n", encoding="utf-8")
        (out / "cost.csv").write_text("\n".join(cost.csv_lines()) + "\n", encoding="utf-8")
        print(f"reports written to {out}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    loaded = load_model(args.model)
    params = loaded.params
    cfg = params.config
    rec = read_emg_csv(args.emg)
    if rec.channels != cfg.c_in:
        raise ConfigError(f"input has {rec.channels} channels but the model expects {cfg.c_in}")
    env = preprocess(rec, loaded.chain)
    frames = (env.frames - loaded.stats.mean) / loaded.stats.std
    period = 1.0 / env.sample_rate_hz
    state = StreamingState(params)
    n_f = cfg.n_fingers
    manifest = _manifest_lines("predict", args)
    with Path(args.out).open("w", encoding="utf-8", newline="\n") as fh:
        for line in manifest:
            fh.write(f"# {line}\n")
        cols = (["t"] + [f"f{c}" for c in range(n_f)]
                + [f"f{c}_attr" for c in range(n_f)] + [f"f{c}_refn" for c in range(n_f)])
        fh.write(",".join(cols) + "\n")
        n_out = 0
        for frame in frames:
            trace = state.step(frame)
            if trace is None:
                continue
            t = trace.end_index * period
            vals = [f"{t:.2f}"]
            vals += [repr(float(v)) for v in trace.y]
            vals += [repr(float(v)) for v in trace.y_attr]
            vals += [repr(float(v)) for v in trace.y_refn]
            fh.write(",".join(vals) + "\n")
            n_out += 1
    print(f"wrote {n_out} predictions to {args.out}")
    return 0


def cmd_info(args: argparse.Namespace) -> int:
    loaded = load_model(args.model)
    cfg = loaded.params.config
    pc = param_count(cfg)
    cost = mac_count(cfg)
    print(f"model: {args.model}")
    for name, value in cfg.as_dict().items():
        print(f"  {name} = {value}")
    print("parameters per stage:")
    for stage, count in pc.as_dict().items():
        print(f"  {stage} = {count}")
    print("MACs per prediction (streaming, dense):")
    for stage, macs in cost.macs_by_stage.items():
        print(f"  {stage} = {macs}")
    print(f"  total = {cost.macs_total}")
    print(f"input compression {cfg.c_in / cfg.d_enc:.1f}x, "
          f"temporal compression {cfg.t_seq}x")
    print(f"combined dimensionality reduction {cfg.c_in / cfg.d_enc * cfg.t_seq:.0f}x")
    if loaded.training:
        print("training metadata:")
        for key, value in loaded.training.items():
            print(f"  {key} = {value}")
    return 0


def cmd_sweep_encoding(args: argparse.Namespace) -> int:
    pre, model_cfg, train_cfg = _load_configs(args)
    ds = load_dataset(args.emg, args.angles, pre, t_seq=model_cfg.t_seq)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = encoding_size_sweep(ds, sizes, model_cfg, train_cfg, n_seeds=args.n_seeds)
    lines = _manifest_lines("sweep-encoding", args)
    text = "\n".join([f"# {l}" for l in lines] + sweep_csv_lines(rows)) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_sweep_lambda(args: argparse.Namespace) -> int:
    pre, model_cfg, train_cfg = _load_configs(args)
    ds = load_dataset(args.emg, args.angles, pre, t_seq=model_cfg.t_seq)
    lams = [float(v) for v in args.lambdas.split(",")]
    rows = []
    best = None
    for lam in lams:
        tcfg = replace(train_cfg, lam=lam)
        params, report = train_loop(ds, model_cfg, tcfg)
        val_metrics, _, _ = evaluate_model(params, ds, "val")
        test_metrics, test_entropy, _ = evaluate_model(params, ds, TEST)
        mean_h = float(test_entropy.mean_entropy.mean())
        top2 = float(test_entropy.top2_mass.mean())
        rows.append((lam, val_metrics.mean_r2, test_metrics.mean_r2, mean_h, top2))
        if best is None or val_metrics.mean_r2 > best[1]:
            best = (lam, val_metrics.mean_r2)
        print(f"lambda={lam}: val_r2={val_metrics.mean_r2:.4f} "
              f"test_r2={test_metrics.mean_r2:.4f} entropy={mean_h:.3f}")
    lines = [f"# {l}" for l in _manifest_lines("sweep-lambda", args)]
    lines.append("lambda,val_mean_r2,test_mean_r2,mean_entropy,top2_mass")
    lines += [",".join(repr(float(v)) for v in row) for row in rows]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best lambda by validation R^2: {best[0]}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpars", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dpars {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic EMG/angle dataset")
    p_synth.add_argument("--config", required=True, help="SyntheticConfig key=value file")
    p_synth.add_argument("--out-dir", required=True)
    p_synth.set_defaults(func=cmd_synth)

    def add_training_flags(p, with_train=True):
        p.add_argument("--emg", required=True)
        p.add_argument("--angles", required=True)
        p.add_argument("--config", default=None, help="key=value config file")
        _add_config_flags(p, PreprocessConfig, "preprocess")
        _add_config_flags(p, DparsConfig, "model")
        if with_train:
            _add_config_flags(p, TrainConfig, "train")

    p_train = sub.add_parser("train", help="train a decoder end to end")
    add_training_flags(p_train)
    p_train.add_argument("--out-model", required=True)
    p_train.add_argument("--report", default=None, help="per-epoch CSV path")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a trained model")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--emg", required=True)
    p_eval.add_argument("--angles", required=True)
    p_eval.add_argument("--split", default=TEST, choices=SPLITS)
    p_eval.add_argument("--eps", type=float, default=0.01)
    p_eval.add_argument("--out-dir", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="streaming inference over a raw EMG CSV")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--emg", required=True)
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(func=cmd_predict)

    p_info = sub.add_parser("info", help="print architecture and cost summary")
    p_info.add_argument("--model", required=True)
    p_info.set_defaults(func=cmd_info)

    p_enc = sub.add_parser("sweep-encoding", help="accuracy vs encoding size")
    add_training_flags(p_enc)
    p_enc.add_argument("--sizes", default="1,2,4,6,10,16")
    p_enc.add_argument("--n-seeds", type=int, default=2)
    p_enc.add_argument("--out", required=True)
    p_enc.set_defaults(func=cmd_sweep_encoding)

    p_lam = sub.add_parser("sweep-lambda", help="accuracy/entropy vs entropy weight")
    add_training_flags(p_lam)
    p_lam.add_argument("--lambdas", default=",".join(str(v) for v in LAMBDA_GRID))
    p_lam.add_argument("--out", required=True)
    p_lam.set_defaults(func=cmd_sweep_lambda)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, ProtocolError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except DparsError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
