"""Accuracy metrics, attractor-distribution statistics, hardware cost model,
encoding-size sweep, and a ridge regression baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from sklearn.linear_model import Ridge

from .dataset import TEST, TRAIN, VAL, LabeledDataset
from .errors import ConfigError
from .model import DparsConfig, DparsParams, forward_batch, param_count

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    """Per-finger and mean coefficients of determination plus MAE (degrees).

    Fingers whose true trajectory has zero variance get NaN and are excluded
    from the mean. pooled_r2 treats all outputs as one pooled series (each
    finger centered by its own mean); the per-finger mean is primary.
    """

    r2: np.ndarray
    mean_r2: float
    pooled_r2: float
    mae: np.ndarray

    def csv_lines(self) -> list[str]:
        n = len(self.r2)
        header = ",".join([f"r2_f{c}" for c in range(n)] + ["mean_r2", "pooled_r2"]
                          + [f"mae_f{c}" for c in range(n)])
        row = ",".join([repr(float(v)) for v in self.r2]
                       + [repr(self.mean_r2), repr(self.pooled_r2)]
                       + [repr(float(v)) for v in self.mae])
        return [header, row]


def r2_scores(pred: np.ndarray, truth: np.ndarray) -> MetricsReport:
    """Coefficient of determination per finger: 1 - SS_res / SS_tot."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ConfigError(f"r2: shapes must match, got {pred.shape} vs {truth.shape}")
    if pred.shape[0] < 2:
        raise ConfigError("r2: need at least two samples")
    residual = ((pred - truth) ** 2).sum(axis=0)
    total = ((truth - truth.mean(axis=0)) ** 2).sum(axis=0)
    r2 = np.full(pred.shape[1], np.nan)
    defined = total > 0
    r2[defined] = 1.0 - residual[defined] / total[defined]
    if not np.all(defined):
        log.warning("%d finger(s) have zero-variance truth; excluded from mean R^2",
                    int(np.count_nonzero(~defined)))
    mean_r2 = float(r2[defined].mean()) if np.any(defined) else float("nan")
    pooled = float(1.0 - residual.sum() / total.sum()) if total.sum() > 0 else float("nan")
    mae = np.abs(pred - truth).mean(axis=0)
    return MetricsReport(r2=r2, mean_r2=mean_r2, pooled_r2=pooled, mae=mae)


@dataclass
class EntropyReport:
    """Attractor-distribution statistics over a set of predictions."""

    mean_entropy: np.ndarray  # per finger, nats
    top1_mass: np.ndarray  # per finger, mean largest probability
    top2_mass: np.ndarray  # per finger, mean mass of the two largest
    supports: list[np.ndarray]  # per finger, state indices with mean prob > eps
    eps: float

    def csv_lines(self) -> list[str]:
        n = len(self.mean_entropy)
        lines = ["finger,mean_entropy,top1_mass,top2_mass,support"]
        for c in range(n):
            sup = " ".join(str(i) for i in self.supports[c])
            lines.append(f"{c},{self.mean_entropy[c]!r},{self.top1_mass[c]!r},"
                         f"{self.top2_mass[c]!r},{sup}")
        return lines


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    logs = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -(p * logs).sum(axis=-1)


def entropy_stats(probs: Sequence[np.ndarray], eps: float = 0.01) -> EntropyReport:
    """Summarize per-finger state distributions over many predictions.

    probs[c] is [N, S_c]. The support set is the states whose mean
    probability exceeds eps.
    """
    if len(probs) == 0 or any(p.shape[0] == 0 for p in probs):
        raise ConfigError("entropy_stats: empty trace set")
    n_fingers = len(probs)
    mean_entropy = np.empty(n_fingers)
    top1 = np.empty(n_fingers)
    top2 = np.empty(n_fingers)
    supports: list[np.ndarray] = []
    for c, p in enumerate(probs):
        mean_entropy[c] = _entropy_rows(p).mean()
        sorted_p = np.sort(p, axis=1)[:, ::-1]
        top1[c] = sorted_p[:, 0].mean()
        top2[c] = sorted_p[:, : min(2, p.shape[1])].sum(axis=1).mean()
        supports.append(np.where(p.mean(axis=0) > eps)[0])
    return EntropyReport(mean_entropy=mean_entropy, top1_mass=top1, top2_mass=top2,
                         supports=supports, eps=eps)


# ---------------------------------------------------------------------------
# Hardware cost model
# ---------------------------------------------------------------------------


@dataclass
class CostReport:
    """Parameters per stage and streaming MACs per prediction, dense and pruned."""

    params_by_stage: dict[str, int]
    params_total: int
    macs_by_stage: dict[str, int]
    macs_total: int
    pruned_macs_by_stage: dict[str, int]
    pruned_macs_total: int
    ratios: dict[str, float]

    def csv_lines(self) -> list[str]:
        lines = ["stage,params,macs_dense,macs_pruned"]
        for stage in self.macs_by_stage:
            lines.append(f"{stage},{self.params_by_stage.get(stage, 0)},"
                         f"{self.macs_by_stage[stage]},{self.pruned_macs_by_stage[stage]}")
        lines.append(f"total,{self.params_total},{self.macs_total},{self.pruned_macs_total}")
        for name, value in self.ratios.items():
            lines.append(f"# {name} = {value!r}")
        return lines


def _mac_stages(config: DparsConfig, support_sizes: Sequence[int]) -> dict[str, int]:
    t, d = config.t_seq, config.d_enc
    return {
        "encoder": config.c_in * d,
        "attention": t * (2 * d * config.h_atn + config.h_atn) + t * d,
        "expansion": d * config.d_exp,
        "attractor_hidden": config.n_fingers * config.d_exp * config.h_attr,
        "attractor_output": sum(config.h_attr * s + s for s in support_sizes),
        "refinement": config.n_fingers * (config.refn_in * config.h_refn + config.h_refn),
    }


def mac_count(config: DparsConfig, support_sizes: Optional[Sequence[int]] = None) -> CostReport:
    """Streaming per-prediction MAC counts (each frame encoded once and
    reused across overlapping windows) plus the dense parameter budget.

    support_sizes, when given, are the per-finger attractor states kept
    after pruning; dense counts use all n_states.
    """
    dense_sizes = [config.n_states] * config.n_fingers
    if support_sizes is None:
        support_sizes = dense_sizes
    support_sizes = list(support_sizes)
    if len(support_sizes) != config.n_fingers:
        raise ConfigError(f"need {config.n_fingers} support sizes")
    if any(s < 1 or s > config.n_states for s in support_sizes):
        raise ConfigError(f"support sizes must lie in [1, {config.n_states}]")
    dense = _mac_stages(config, dense_sizes)
    pruned = _mac_stages(config, support_sizes)
    pc = param_count(config)
    params_by_stage = {
        "encoder": pc.encoder,
        "attention": pc.attention,
        "expansion": pc.expansion,
        "attractor_hidden": 0,
        "attractor_output": 0,
        "refinement": pc.refinement,
    }
    # parameters are reported per architectural stage, not per MAC stage
    params_by_stage["attractor_hidden"] = config.n_fingers * (
        config.d_exp * config.h_attr + config.h_attr
    )
    params_by_stage["attractor_output"] = config.n_fingers * (
        config.h_attr * config.n_states + config.n_states
    )
    ratios = {
        "input_compression": config.c_in / config.d_enc,
        "temporal_compression": float(config.t_seq),
        "combined_compression": config.c_in / config.d_enc * config.t_seq,
        "attractor_output_mac_ratio": dense["attractor_output"] / pruned["attractor_output"],
        "total_mac_ratio": sum(dense.values()) / sum(pruned.values()),
    }
    return CostReport(
        params_by_stage=params_by_stage,
        params_total=pc.total,
        macs_by_stage=dense,
        macs_total=sum(dense.values()),
        pruned_macs_by_stage=pruned,
        pruned_macs_total=sum(pruned.values()),
        ratios=ratios,
    )


def prune_attractor_heads(
    params: DparsParams, supports: Sequence[np.ndarray]
) -> tuple[DparsParams, CostReport]:
    """Drop attractor output rows outside each finger's support set.

    The softmax then renormalizes over the remaining states. supports index
    into each finger's current states (typically from entropy_stats on
    validation data).
    """
    cfg = params.config
    if len(supports) != cfg.n_fingers:
        raise ConfigError(f"need {cfg.n_fingers} support sets")
    pruned = params.copy()
    for c, sup in enumerate(supports):
        sup = np.sort(np.asarray(sup, dtype=np.int64))
        if sup.size == 0:
            raise ConfigError(f"finger {c}: empty support set")
        if sup.min() < 0 or sup.max() >= len(params.attr_support[c]):
            raise ConfigError(f"finger {c}: support indices out of range")
        head = pruned.attr[c]
        head.w2.data = head.w2.data[sup]
        head.w2.grad = np.zeros_like(head.w2.data)
        head.b2.data = head.b2.data[sup]
        head.b2.grad = np.zeros_like(head.b2.data)
        pruned.attr_support[c] = params.attr_support[c][sup]
    cost = mac_count(cfg, [len(s) for s in pruned.attr_support])
    return pruned, cost


# ---------------------------------------------------------------------------
# Baseline and sweeps
# ---------------------------------------------------------------------------

RIDGE_ALPHAS = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)


def baseline_linear(
    dataset: LabeledDataset, alphas: Sequence[float] = RIDGE_ALPHAS
) -> tuple[MetricsReport, float]:
    """Ridge regression from flattened windows to the six angles.

    The regularization strength is chosen on the validation split; test
    metrics and the chosen alpha are returned.
    """
    x_train = dataset.normalized_windows(TRAIN).reshape(len(dataset.split_indices(TRAIN)), -1)
    y_train = dataset.targets(TRAIN)
    x_val = dataset.normalized_windows(VAL).reshape(len(dataset.split_indices(VAL)), -1)
    y_val = dataset.targets(VAL)
    best_alpha, best_score, best_model = None, -np.inf, None
    for alpha in alphas:
        model = Ridge(alpha=alpha).fit(x_train, y_train)
        score = r2_scores(model.predict(x_val), y_val).mean_r2
        if score > best_score:
            best_alpha, best_score, best_model = alpha, score, model
    x_test = dataset.normalized_windows(TEST).reshape(len(dataset.split_indices(TEST)), -1)
    metrics = r2_scores(best_model.predict(x_test), dataset.targets(TEST))
    return metrics, float(best_alpha)


@dataclass
class SweepRow:
    d_enc: int
    mean_r2: float
    var_r2: float


def encoding_size_sweep(
    dataset: LabeledDataset,
    sizes: Sequence[int],
    base_config: DparsConfig,
    train_config,
    n_seeds: int = 2,
) -> list[SweepRow]:
    """Train one model per (encoding size, seed) and report test mean R^2."""
    from .train import train_loop  # deferred: train imports this module

    if n_seeds < 2:
        raise ConfigError("need at least 2 seeds per size for a variance estimate")
    rows: list[SweepRow] = []
    test_ends = dataset.split_indices(TEST)
    x_test = dataset.gather_normalized(test_ends)
    y_test = dataset.frame_targets[test_ends]
    for size in sizes:
        scores = []
        for s in range(n_seeds):
            cfg = replace(base_config, d_enc=size)
            tcfg = replace(train_config, seed=train_config.seed + s)
            params, _report = train_loop(dataset, cfg, tcfg)
            outs = forward_batch(x_test, params)
            scores.append(r2_scores(outs.y, y_test).mean_r2)
        rows.append(SweepRow(d_enc=size, mean_r2=float(np.mean(scores)),
                             var_r2=float(np.var(scores))))
    return rows


def sweep_csv_lines(rows: Sequence[SweepRow]) -> list[str]:
    lines = ["d_enc,mean_r2,var_r2"]
    lines += [f"{r.d_enc},{r.mean_r2!r},{r.var_r2!r}" for r in rows]
    return lines


def evaluate_model(params: DparsParams, dataset: LabeledDataset, split: str = TEST,
                   eps: float = 0.01):
    """Forward a split and return (MetricsReport, EntropyReport, BatchOutputs)."""
    ends = dataset.split_indices(split)
    if len(ends) == 0:
        raise ConfigError(f"split {split!r} is empty")
    outs = forward_batch(dataset.gather_normalized(ends), params)
    metrics = r2_scores(outs.y, dataset.frame_targets[ends])
    entropy = entropy_stats(outs.probs, eps=eps)
    return metrics, entropy, outs
