"""Self-describing plain-text model document.

One file carries the architecture config, every parameter array (row-major,
one row per line, shortest-round-trip float text), normalization statistics,
the preprocessing chain, and training metadata. save -> load -> save is
byte-identical.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import NormalizationStats
from .errors import DataFormatError
from .model import DparsConfig, DparsParams
from .sigproc import PreprocessConfig

MAGIC = "dpars-model v1"

TRAINING_KEYS = {
    "seed": int,
    "epochs": int,
    "lambda": float,
    "learning_rate": float,
    "batch_size": int,
    "best_epoch": int,
    "lr_halvings": int,
    "learning_rate_used": float,
}


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _vector_line(vec: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in vec)


def save_model(
    path,
    params: DparsParams,
    stats: NormalizationStats,
    chain: PreprocessConfig,
    training: Optional[dict] = None,
    manifest: Optional[dict] = None,
) -> None:
    cfg = params.config
    lines: list[str] = [MAGIC, ""]
    if manifest:
        lines.append("[manifest]")
        lines += [f"{k} = {_fmt(v)}" for k, v in manifest.items()]
        lines.append("")
    lines.append("[config]")
    lines += [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in fields(cfg)]
    lines.append("")
    lines.append("[normalization]")
    lines.append(f"mean = {_vector_line(stats.mean)}")
    lines.append(f"std = {_vector_line(stats.std)}")
    lines.append("")
    lines.append("[preprocess]")
    lines += [f"{k} = {_fmt(v)}" for k, v in chain.as_dict().items()]
    lines.append("")
    if training:
        lines.append("[training]")
        lines += [f"{k} = {_fmt(v)}" for k, v in training.items()]
        lines.append("")
    lines.append("[support]")
    for c, sup in enumerate(params.attr_support):
        lines.append(f"f{c} = " + " ".join(str(int(i)) for i in sup))
    lines.append("")
    for name, arr in params.named_arrays().items():
        lines.append(f"[param {name}]")
        mat = np.atleast_2d(arr)
        lines.append("shape = " + " ".join(str(s) for s in arr.shape))
        lines += [_vector_line(row) for row in mat]
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8", newline="\n")


class LoadedModel:
    """Everything a saved model file carries."""

    def __init__(self, params: DparsParams, stats: NormalizationStats,
                 chain: PreprocessConfig, training: dict, manifest: dict) -> None:
        self.params = params
        self.stats = stats
        self.chain = chain
        self.training = training
        self.manifest = manifest


def _parse_sections(text: str, path) -> dict[str, list[str]]:
    lines = text.split("\n")
    if not lines or lines[0] != MAGIC:
        raise DataFormatError(f"{path}: not a model file (missing '{MAGIC}' header)")
    sections: dict[str, list[str]] = {}
    current: Optional[str] = None
    for line in lines[1:]:
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1]
            sections[current] = []
        elif current is None:
            raise DataFormatError(f"{path}: content before first section")
        else:
            sections[current].append(stripped)
    return sections


def _parse_kv_section(body: list[str], path, section: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in body:
        if "=" not in line:
            raise DataFormatError(f"{path}: malformed line in [{section}]: {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_model(path) -> LoadedModel:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as err:
        raise DataFormatError(f"{path}: not a text model file ({err})") from err
    sections = _parse_sections(text, path)
    try:
        config = DparsConfig.from_kv(_parse_kv_section(sections["config"], path, "config"))
        norm_raw = _parse_kv_section(sections["normalization"], path, "normalization")
        stats = NormalizationStats(
            mean=np.array([float(v) for v in norm_raw["mean"].split()]),
            std=np.array([float(v) for v in norm_raw["std"].split()]),
        )
        chain = PreprocessConfig.from_kv(_parse_kv_section(sections["preprocess"], path, "preprocess"))
        training_raw = _parse_kv_section(sections.get("training", []), path, "training")
        training = {}
        for key, value in training_raw.items():
            caster = TRAINING_KEYS.get(key, str)
            training[key] = caster(value)
        manifest = _parse_kv_section(sections.get("manifest", []), path, "manifest")
        support_raw = _parse_kv_section(sections["support"], path, "support")
        support = [
            np.array([int(v) for v in support_raw[f"f{c}"].split()], dtype=np.int64)
            for c in range(config.n_fingers)
        ]
        arrays: dict[str, np.ndarray] = {}
        for name, body in sections.items():
            if not name.startswith("param "):
                continue
            pname = name[len("param "):]
            shape = tuple(int(s) for s in body[0].partition("=")[2].split())
            values = [[float(v) for v in row.split()] for row in body[1:]]
            arrays[pname] = np.array(values).reshape(shape)
        params = DparsParams.from_arrays(config, arrays, support=support)
    except DataFormatError:
        raise
    except Exception as err:
        raise DataFormatError(f"{path}: corrupt model file ({err})") from err
    return LoadedModel(params=params, stats=stats, chain=chain,
                       training=training, manifest=manifest)
