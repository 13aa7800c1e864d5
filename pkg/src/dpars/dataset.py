"""Dataset assembly: CSV loading, repetition-protocol splits, train-only
normalization, and a seeded synthetic EMG/angle generator.

The split protocol is fixed: repetitions 1-4 train, 5 validation, 6 test.
Angle targets are six columns (five finger flexions plus thumb opposition)
in degrees, clamped to [90, 180] at load time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AlignmentError, ConfigError, DataFormatError, ProtocolError
from .sigproc import EnvelopeStream, PreprocessConfig, RawEmgRecording, Window, preprocess, window_stream

log = logging.getLogger(__name__)

ANGLE_MIN = 90.0
ANGLE_MAX = 180.0
N_FINGERS = 6

TRAIN, VAL, TEST = "train", "val", "test"
SPLITS = (TRAIN, VAL, TEST)


def split_by_repetition(rep_ids: np.ndarray) -> np.ndarray:
    """Map repetition ids onto split tags: 1-4 train, 5 val, 6 test."""
    rep_ids = np.asarray(rep_ids, dtype=np.int64)
    if rep_ids.size and (rep_ids.min() < 1 or rep_ids.max() > 6):
        bad = rep_ids[(rep_ids < 1) | (rep_ids > 6)][0]
        raise ProtocolError(f"repetition id {bad} outside the 1..6 protocol")
    tags = np.full(rep_ids.shape, TRAIN, dtype="U5")
    tags[rep_ids == 5] = VAL
    tags[rep_ids == 6] = TEST
    return tags


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel z-score statistics, fit on the training split only."""

    mean: np.ndarray
    std: np.ndarray


def fit_normalization(windows) -> NormalizationStats:
    """Fit per-channel mean/std over training windows.

    Accepts a list of Window objects or a stacked [N, T, C] array. The
    standard deviation is floored at 1e-8 so constant channels map to zero.
    """
    if isinstance(windows, np.ndarray):
        flat = windows.reshape(-1, windows.shape[-1])
    else:
        if len(windows) == 0:
            raise ConfigError("cannot fit normalization on an empty training split")
        flat = np.concatenate([w.data for w in windows], axis=0)
    if flat.shape[0] == 0:
        raise ConfigError("cannot fit normalization on an empty training split")
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-8)
    return NormalizationStats(mean=mean, std=std)


def apply_normalization(stats: NormalizationStats, window_data: np.ndarray) -> np.ndarray:
    """Z-score window frames with training statistics."""
    return (window_data - stats.mean) / stats.std


def clamp_targets(angles: np.ndarray) -> tuple[np.ndarray, int]:
    """Clamp angle targets into [90, 180]; returns (clamped, n_values_clamped)."""
    angles = np.asarray(angles, dtype=np.float64)
    n_out = int(np.count_nonzero((angles < ANGLE_MIN) | (angles > ANGLE_MAX)))
    if n_out:
        log.warning("clamped %d angle values into [%g, %g]", n_out, ANGLE_MIN, ANGLE_MAX)
    return np.clip(angles, ANGLE_MIN, ANGLE_MAX), n_out


@dataclass
class LabeledDataset:
    """Aligned (envelope-window, angle-target) pairs with split tags.

    Windows are views into the envelope frame matrix; each window's target
    is the angle row at its end index. Normalization statistics are fit on
    the training split only.
    """

    env_frames: np.ndarray  # [L, C]
    frame_targets: np.ndarray  # [L, 6]
    end_indices: np.ndarray  # [N] window end positions into env_frames
    tags: np.ndarray  # [N] split tag per window
    stats: NormalizationStats
    t_seq: int
    hop: int
    n_clamped: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._norm_windows_view = None

    @property
    def n_windows(self) -> int:
        return len(self.end_indices)

    def split_indices(self, split: Optional[str] = None) -> np.ndarray:
        """Window end indices for a split (or all windows when split is None)."""
        if split is None:
            return self.end_indices
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return self.end_indices[self.tags == split]

    def windows(self, split: Optional[str] = None) -> list[Window]:
        return [
            Window(data=self.env_frames[e - self.t_seq + 1 : e + 1], end_index=int(e))
            for e in self.split_indices(split)
        ]

    def targets(self, split: Optional[str] = None) -> np.ndarray:
        return self.frame_targets[self.split_indices(split)]

    def _normalized_view(self) -> np.ndarray:
        if self._norm_windows_view is None:
            norm = apply_normalization(self.stats, self.env_frames)
            # [L - T + 1, T, C] zero-copy view over the normalized frames
            self._norm_windows_view = sliding_window_view(norm, self.t_seq, axis=0).transpose(0, 2, 1)
        return self._norm_windows_view

    def gather_normalized(self, end_indices: np.ndarray) -> np.ndarray:
        """Materialize normalized [n, T, C] windows for the given end indices."""
        return self._normalized_view()[np.asarray(end_indices) - (self.t_seq - 1)]

    def normalized_windows(self, split: Optional[str] = None) -> np.ndarray:
        return self.gather_normalized(self.split_indices(split))

    def replace_stats(self, stats: NormalizationStats) -> None:
        """Swap in externally provided normalization (e.g. from a model file)."""
        self.stats = stats
        self._norm_windows_view = None


def assemble_dataset(
    env: EnvelopeStream,
    angles: np.ndarray,
    t_seq: int = 20,
    hop: int = 1,
    stats: Optional[NormalizationStats] = None,
) -> LabeledDataset:
    """Pair envelope windows with per-frame angle targets and tag splits.

    The angle stream must match the envelope length within one frame;
    both are truncated to the shorter one.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.ndim != 2 or angles.shape[1] != N_FINGERS:
        raise DataFormatError(f"angle stream must have {N_FINGERS} columns")
    n_env, n_ang = len(env), angles.shape[0]
    if abs(n_env - n_ang) > 1:
        raise AlignmentError(
            f"envelope ({n_env} frames) and angle stream ({n_ang} frames) disagree by more than 1"
        )
    n = min(n_env, n_ang)
    frames = env.frames[:n]
    rep = env.rep_ids[:n] if env.rep_ids is not None else None
    targets, n_clamped = clamp_targets(angles[:n])

    trimmed = EnvelopeStream(env.sample_rate_hz, frames, rep_ids=rep, meta=env.meta)
    wins = window_stream(trimmed, t_seq, hop)
    ends = np.array([w.end_index for w in wins], dtype=np.int64)
    if rep is not None and len(ends):
        tags = split_by_repetition(rep[ends])
    else:
        tags = np.full(ends.shape, TRAIN, dtype="U5")
    if stats is None:
        train_ends = ends[tags == TRAIN]
        if len(train_ends) == 0:
            raise ConfigError("training split is empty; cannot fit normalization")
        raw_view = sliding_window_view(frames, t_seq, axis=0).transpose(0, 2, 1)
        stats = fit_normalization(raw_view[train_ends - (t_seq - 1)])
    return LabeledDataset(
        env_frames=frames,
        frame_targets=targets,
        end_indices=ends,
        tags=tags,
        stats=stats,
        t_seq=t_seq,
        hop=hop,
        n_clamped=n_clamped,
        meta=dict(env.meta),
    )


def build_dataset(
    rec: RawEmgRecording,
    angles: np.ndarray,
    chain: PreprocessConfig,
    t_seq: int = 20,
    hop: int = 1,
    stats: Optional[NormalizationStats] = None,
) -> LabeledDataset:
    """Preprocess a raw recording and assemble the labeled dataset."""
    return assemble_dataset(preprocess(rec, chain), angles, t_seq=t_seq, hop=hop, stats=stats)


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------


def _read_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a comma-separated file: '#' comment lines, one header row, data."""
    path = Path(path)
    header: list[str] | None = None
    rows: list[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if header is None:
                header = stripped.split(",")
            else:
                rows.append(stripped)
    if header is None:
        raise DataFormatError(f"{path}: no header row found")
    if not rows:
        return header, np.empty((0, len(header)))
    data = np.loadtxt(rows, delimiter=",", ndmin=2, dtype=np.float64)
    if data.shape[1] != len(header):
        raise DataFormatError(f"{path}: {data.shape[1]} columns but header names {len(header)}")
    return header, data


def read_emg_csv(path) -> RawEmgRecording:
    """Load a raw recording from CSV with header `t,ch0..ch{C-1},rep`."""
    header, data = _read_csv(path)
    if len(header) < 3 or header[0] != "t" or header[-1] != "rep":
        raise DataFormatError(f"{path}: expected header t,ch0..ch{{C-1}},rep")
    for i, name in enumerate(header[1:-1]):
        if name != f"ch{i}":
            raise DataFormatError(f"{path}: channel column {i} named {name!r}, expected 'ch{i}'")
    if data.shape[0] < 2:
        raise DataFormatError(f"{path}: need at least two samples to infer the rate")
    t = data[:, 0]
    fs = (len(t) - 1) / (t[-1] - t[0])
    # timestamps carry limited precision; snap to the nearest integer rate
    if abs(fs - round(fs)) < 0.01:
        fs = float(round(fs))
    return RawEmgRecording(
        sample_rate_hz=fs,
        samples=data[:, 1:-1],
        rep_ids=data[:, -1].astype(np.int64),
    )


def write_emg_csv(path, rec: RawEmgRecording, manifest: Sequence[str] = ()) -> None:
    """Write a raw recording as CSV (microvolts, 6 significant digits)."""
    n, c = rec.samples.shape
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for line in manifest:
            fh.write(f"# {line}\n")
        fh.write("t," + ",".join(f"ch{i}" for i in range(c)) + ",rep\n")
        ts = np.arange(n) / rec.sample_rate_hz
        for i in range(n):
            vals = ",".join(f"{v:.6g}" for v in rec.samples[i])
            fh.write(f"{ts[i]:.6f},{vals},{rec.rep_ids[i]}\n")


def read_angles_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Load an angle stream from CSV with header `t,f0..f5`; returns (t, angles)."""
    header, data = _read_csv(path)
    expected = ["t"] + [f"f{i}" for i in range(N_FINGERS)]
    if header != expected:
        raise DataFormatError(f"{path}: expected header {','.join(expected)}")
    if data.shape[0] == 0:
        raise DataFormatError(f"{path}: angle file is empty")
    return data[:, 0], data[:, 1:]


def write_angles_csv(path, angles: np.ndarray, frame_rate_hz: float = 100.0,
                     manifest: Sequence[str] = ()) -> None:
    angles = np.asarray(angles)
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for line in manifest:
            fh.write(f"# {line}\n")
        fh.write("t," + ",".join(f"f{i}" for i in range(N_FINGERS)) + "\n")
        for i in range(angles.shape[0]):
            vals = ",".join(repr(float(v)) for v in angles[i])
            fh.write(f"{i / frame_rate_hz:.2f},{vals}\n")


def load_dataset(
    emg_csv,
    angles_csv,
    chain: PreprocessConfig,
    t_seq: int = 20,
    hop: int = 1,
    stats: Optional[NormalizationStats] = None,
) -> LabeledDataset:
    """Load CSVs, preprocess, align angles to the 100 Hz envelope grid, and
    assemble the labeled dataset.

    Angle streams not already at 100 Hz are resampled by nearest frame.
    """
    rec = read_emg_csv(emg_csv)
    t_ang, angles = read_angles_csv(angles_csv)
    env = preprocess(rec, chain)
    if len(t_ang) > 1:
        rate = (len(t_ang) - 1) / (t_ang[-1] - t_ang[0])
    else:
        rate = env.sample_rate_hz
    if abs(rate - env.sample_rate_hz) > 0.001 * env.sample_rate_hz:
        # nearest-frame resample onto the envelope clock
        grid = np.arange(len(env)) / env.sample_rate_hz
        idx = np.clip(np.searchsorted(t_ang, grid), 1, len(t_ang) - 1)
        idx = np.where(np.abs(t_ang[idx - 1] - grid) <= np.abs(t_ang[idx] - grid), idx - 1, idx)
        angles = angles[idx]
    return assemble_dataset(env, angles, t_seq=t_seq, hop=hop, stats=stats)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

PLATEAU_PALETTE = (90.0, 112.5, 135.0, 157.5, 180.0)

# Default movement: every finger dwells between fully flexed and fully
# extended. Two on-grid levels per finger keep the attractor concentration
# and pruning behavior measurable; other level sets are configurable.
DEFAULT_FINGER_PAIR = (90.0, 180.0)

VELOCITY_REF_DEG_S = 400.0


@dataclass(frozen=True)
class SyntheticConfig:
    """Seeded generator for (raw EMG, finger angle) pairs.

    Angles are piecewise plateaus with raised-cosine transitions; per-muscle
    drives are smooth saturating functions of angle whose amplitude also
    scales with angular speed (co-contraction bursts during movement), which
    keeps the envelope-to-angle map deliberately nonlinear. Envelope channels
    are a nonnegative mixing of the drives, amplitude-modulating white noise
    carriers at the acquisition rate.
    """

    seed: int = 42
    duration_s: float = 20.0
    n_repetitions: int = 6
    n_channels: int = 64
    emg_rate_hz: float = 2400.0
    frame_rate_hz: float = 100.0
    plateau_levels: tuple = PLATEAU_PALETTE
    finger_levels: Optional[tuple] = None  # per-finger level sets; None = default pairs
    dwell_s: tuple = (1.8, 3.0)
    transition_ms: float = 200.0
    mixing_sparsity: float = 3.0
    channel_gain_uv: tuple = (25.0, 60.0)
    noise_std_uv: float = 5.0
    velocity_gain: float = 1.5
    drive_exponent: float = 1.6
    tonic_level: float = 0.5
    synergy_gain: float = 2.5
    primary_gain: float = 1.5  # extra weight of each channel's primary finger
    drift_std: float = 0.22  # per-channel slow gain wander (electrode impedance drift)
    drift_period_s: float = 5.0

    def finger_level_sets(self) -> list[np.ndarray]:
        if self.finger_levels is not None:
            sets = [np.asarray(s, dtype=np.float64) for s in self.finger_levels]
            if len(sets) != N_FINGERS:
                raise ConfigError(f"finger_levels must list {N_FINGERS} level sets")
            return sets
        return [np.asarray(DEFAULT_FINGER_PAIR) for _ in range(N_FINGERS)]

    @classmethod
    def from_kv(cls, raw: dict) -> "SyntheticConfig":
        kwargs: dict = {}
        scalar = {
            "seed": int, "duration_s": float, "n_repetitions": int, "n_channels": int,
            "emg_rate_hz": float, "frame_rate_hz": float, "transition_ms": float,
            "mixing_sparsity": float, "noise_std_uv": float, "velocity_gain": float,
            "drive_exponent": float, "tonic_level": float, "synergy_gain": float,
            "primary_gain": float, "drift_std": float, "drift_period_s": float,
        }
        for key, value in raw.items():
            if key in scalar:
                kwargs[key] = scalar[key](value)
            elif key in ("plateau_levels", "dwell_s", "channel_gain_uv"):
                kwargs[key] = tuple(float(v) for v in value.split(","))
            elif key == "finger_levels":
                kwargs[key] = tuple(
                    tuple(float(v) for v in group.split(",")) for group in value.split(";")
                )
            else:
                raise ConfigError(f"unknown synthetic key {key!r}")
        return cls(**kwargs)


def _plateau_trajectory(rng: np.random.Generator, n_frames: int, levels: np.ndarray,
                        dwell_s: tuple, transition_frames: int, frame_rate: float) -> np.ndarray:
    out = np.empty(n_frames)
    level = float(rng.choice(levels))
    pos = 0
    while pos < n_frames:
        dwell = int(round(rng.uniform(*dwell_s) * frame_rate))
        stop = min(pos + max(dwell, 1), n_frames)
        out[pos:stop] = level
        pos = stop
        if pos >= n_frames:
            break
        others = levels[levels != level]
        nxt = float(rng.choice(others)) if others.size else level
        if nxt != level and transition_frames > 0:
            stop = min(pos + transition_frames, n_frames)
            s = (np.arange(stop - pos) + 1) / transition_frames
            out[pos:stop] = level + (nxt - level) * 0.5 * (1.0 - np.cos(np.pi * np.minimum(s, 1.0)))
            pos = stop
        level = nxt
    return out


def synthesize(config: SyntheticConfig) -> tuple[RawEmgRecording, np.ndarray]:
    """Generate a seeded (raw EMG recording, 100 Hz angle stream) pair.

    The same seed always produces bit-identical outputs.
    """
    up = config.emg_rate_hz / config.frame_rate_hz
    if abs(up - round(up)) > 1e-9:
        raise ConfigError("emg_rate_hz must be an integer multiple of frame_rate_hz")
    up = int(round(up))
    rng = np.random.default_rng(config.seed)
    frames_per_rep = int(round(config.duration_s * config.frame_rate_hz))
    n_frames = frames_per_rep * config.n_repetitions
    level_sets = config.finger_level_sets()
    transition_frames = int(round(config.transition_ms / 1000.0 * config.frame_rate_hz))

    angles = np.empty((n_frames, N_FINGERS))
    for rep in range(config.n_repetitions):
        lo, hi = rep * frames_per_rep, (rep + 1) * frames_per_rep
        for c in range(N_FINGERS):
            angles[lo:hi, c] = _plateau_trajectory(
                rng, frames_per_rep, level_sets[c], config.dwell_s,
                transition_frames, config.frame_rate_hz,
            )

    # saturating flexor/extensor drives with a speed-dependent burst, plus
    # shared-muscle synergies (products of adjacent flexor drives), which keep
    # the envelope-to-angle map out of reach of a purely linear readout
    x = np.clip((angles - ANGLE_MIN) / (ANGLE_MAX - ANGLE_MIN), 0.0, 1.0)
    speed = np.abs(np.gradient(angles, axis=0)) * config.frame_rate_hz / VELOCITY_REF_DEG_S
    burst = 1.0 + config.velocity_gain * speed
    p = config.drive_exponent
    flex = (1.0 - x) ** p * burst
    ext = x**p * burst
    n_syn = N_FINGERS - 1
    drives = np.empty((n_frames, 2 * N_FINGERS + n_syn + 1))
    drives[:, 0:2 * N_FINGERS:2] = flex
    drives[:, 1:2 * N_FINGERS:2] = ext
    drives[:, 2 * N_FINGERS : 2 * N_FINGERS + n_syn] = flex[:, :-1] * flex[:, 1:]
    drives[:, -1] = config.tonic_level

    mixing = rng.uniform(size=(config.n_channels, drives.shape[1])) ** config.mixing_sparsity
    mixing[:, 2 * N_FINGERS : 2 * N_FINGERS + n_syn] *= config.synergy_gain
    # each channel sits over one primary muscle compartment (alternating
    # flexor/extensor side), so every finger gets a dedicated contrast share
    # of the grid regardless of the random draw
    rows = np.arange(config.n_channels)
    primary_col = 2 * (rows % N_FINGERS) + (rows // N_FINGERS) % 2
    mixing[rows, primary_col] += config.primary_gain
    mixing /= mixing.sum(axis=1, keepdims=True)
    gains = rng.uniform(*config.channel_gain_uv, size=config.n_channels)
    env = (drives @ mixing.T) * gains  # [n_frames, C], microvolts

    if config.drift_std > 0:
        # slow per-channel gain wander: cosine-interpolated noise nodes
        node_frames = max(int(round(config.drift_period_s * config.frame_rate_hz)), 1)
        n_nodes = n_frames // node_frames + 2
        nodes = rng.standard_normal((n_nodes, config.n_channels)) * config.drift_std
        pos = np.arange(n_frames) / node_frames
        i0 = pos.astype(np.int64)
        w = 0.5 - 0.5 * np.cos(np.pi * (pos - i0))[:, None]
        drift = nodes[i0] * (1.0 - w) + nodes[i0 + 1] * w
        env = env * np.maximum(1.0 + drift, 0.05)

    env_hi = np.repeat(env, up, axis=0)
    raw = env_hi * rng.standard_normal(env_hi.shape)
    raw += config.noise_std_uv * rng.standard_normal(env_hi.shape)

    rep_frames = np.repeat(np.arange(1, config.n_repetitions + 1), frames_per_rep)
    rec = RawEmgRecording(
        sample_rate_hz=config.emg_rate_hz,
        samples=raw,
        rep_ids=np.repeat(rep_frames, up),
    )
    return rec, angles


def benchmark_dataset(
    seed: int = 42,
    synth: Optional[SyntheticConfig] = None,
    chain: Optional[PreprocessConfig] = None,
    t_seq: int = 20,
    hop: int = 1,
) -> LabeledDataset:
    """The shipped synthetic benchmark: generate, preprocess, split, normalize."""
    synth = synth if synth is not None else SyntheticConfig(seed=seed)
    chain = chain if chain is not None else PreprocessConfig()
    rec, angles = synthesize(synth)
    ds = build_dataset(rec, angles, chain, t_seq=t_seq, hop=hop)
    ds.meta["synthetic_seed"] = synth.seed
    return ds
