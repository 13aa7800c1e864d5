"""Streaming DSP front end for multichannel surface EMG.

Converts raw recordings into 100 Hz envelope streams through a causal
bandpass -> notch -> rectify+lowpass -> decimate chain, then segments the
stream into fixed-size sliding windows. All filtering is causal with zero
initial state (the target is a real-time decoder), implemented as cascaded
second-order sections.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy import signal

from .errors import ConfigError, FilterSpecError


@dataclass
class RawEmgRecording:
    """Multichannel raw EMG at acquisition rate with per-sample repetition ids.

    samples: [time x channels], microvolts. rep_ids must be non-decreasing
    (repetition ranges are contiguous and ordered in time).
    """

    sample_rate_hz: float
    samples: np.ndarray
    rep_ids: np.ndarray

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.rep_ids = np.asarray(self.rep_ids, dtype=np.int64)
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample rate must be positive")
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise ConfigError("samples must be a [time x channels] matrix")
        if not np.all(np.isfinite(self.samples)):
            raise ConfigError("raw EMG contains non-finite values")
        if self.rep_ids.shape != (self.samples.shape[0],):
            raise ConfigError("rep_ids must label every sample")
        if np.any(np.diff(self.rep_ids) < 0):
            raise ConfigError("repetition ranges must be ordered in time")

    @property
    def channels(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class FilterSpec:
    """Specification for one stage of the filter chain.

    kind 'bandpass' uses low_cut_hz/high_cut_hz (passband edges), 'lowpass'
    uses high_cut_hz as the corner, 'notch' uses center_hz and q.
    """

    kind: str
    low_cut_hz: Optional[float] = None
    high_cut_hz: Optional[float] = None
    center_hz: Optional[float] = None
    q: Optional[float] = None
    order: int = 2

    def validate(self, sample_rate_hz: float) -> None:
        nyq = sample_rate_hz / 2.0
        if self.order < 1:
            raise FilterSpecError(f"order must be >= 1, got {self.order}")
        if self.kind == "bandpass":
            if self.low_cut_hz is None or self.high_cut_hz is None:
                raise FilterSpecError("bandpass needs low_cut_hz and high_cut_hz")
            if not (0.0 < self.low_cut_hz < self.high_cut_hz):
                raise FilterSpecError("bandpass needs 0 < low < high")
            if self.high_cut_hz >= nyq:
                raise FilterSpecError(
                    f"cutoff {self.high_cut_hz} Hz must lie strictly below Nyquist ({nyq} Hz)"
                )
        elif self.kind == "lowpass":
            if self.high_cut_hz is None or self.high_cut_hz <= 0:
                raise FilterSpecError("lowpass needs a positive high_cut_hz corner")
            if self.high_cut_hz >= nyq:
                raise FilterSpecError(
                    f"cutoff {self.high_cut_hz} Hz must lie strictly below Nyquist ({nyq} Hz)"
                )
        elif self.kind == "notch":
            if self.center_hz is None or not (0.0 < self.center_hz < nyq):
                raise FilterSpecError("notch center must lie strictly inside (0, Nyquist)")
            if self.q is None or self.q <= 0:
                raise FilterSpecError("notch needs a positive q")
        else:
            raise FilterSpecError(f"unknown filter kind {self.kind!r}")


@dataclass(frozen=True)
class FilterCoefficients:
    """Cascaded biquad (second-order-section) coefficients, [n_sections x 6]."""

    sos: np.ndarray
    spec: FilterSpec
    sample_rate_hz: float


def design_filter(spec: FilterSpec, sample_rate_hz: float) -> FilterCoefficients:
    """Design a causal recursive filter as cascaded second-order sections.

    Butterworth for bandpass/lowpass, a standard biquad for the notch.
    Raises FilterSpecError for cutoffs at or beyond Nyquist and verifies
    that every pole lies strictly inside the unit circle.
    """
    spec.validate(sample_rate_hz)
    if spec.kind == "bandpass":
        sos = signal.butter(
            spec.order,
            [spec.low_cut_hz, spec.high_cut_hz],
            btype="bandpass",
            fs=sample_rate_hz,
            output="sos",
        )
    elif spec.kind == "lowpass":
        sos = signal.butter(
            spec.order, spec.high_cut_hz, btype="lowpass", fs=sample_rate_hz, output="sos"
        )
    else:
        b, a = signal.iirnotch(spec.center_hz, spec.q, fs=sample_rate_hz)
        sos = signal.tf2sos(b, a)
    sos = np.asarray(sos, dtype=np.float64)
    for section in sos:
        poles = np.roots(section[3:])
        if poles.size and np.max(np.abs(poles)) >= 1.0:
            raise FilterSpecError("designed filter is not stable")
    return FilterCoefficients(sos=sos, spec=spec, sample_rate_hz=float(sample_rate_hz))


def apply_filter(coeffs: FilterCoefficients, x: np.ndarray) -> np.ndarray:
    """Causally filter along time (axis 0) with zero initial state.

    x may be [T] or [T x channels]; channels are filtered independently and
    the output has the same length as the input.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ConfigError("apply_filter: input contains non-finite values")
    return signal.sosfilt(coeffs.sos, x, axis=0)


def envelope(x: np.ndarray, lowpass: FilterSpec, sample_rate_hz: float) -> np.ndarray:
    """Rectify then low-pass filter; post-filter ringing below zero is clipped.

    Args:
        x: [T] or [T x channels] signal.
        lowpass: lowpass FilterSpec for the smoothing stage.
        sample_rate_hz: rate of x.
    Returns:
        Nonnegative envelope, same shape as x.
    """
    coeffs = design_filter(lowpass, sample_rate_hz)
    smoothed = apply_filter(coeffs, np.abs(np.asarray(x, dtype=np.float64)))
    return np.maximum(smoothed, 0.0)


def decimate(x: np.ndarray, factor: int) -> np.ndarray:
    """Keep every factor-th frame starting at index 0.

    Only complete factor-blocks are kept, so the output length is exactly
    len(x) // factor. Assumes the input is already band-limited by the
    envelope lowpass; no extra anti-alias stage is applied.
    """
    if factor <= 0:
        raise ConfigError(f"decimation factor must be >= 1, got {factor}")
    x = np.asarray(x)
    n_keep = x.shape[0] // factor
    return x[: n_keep * factor : factor]


@dataclass
class EnvelopeStream:
    """100 Hz nonnegative envelope frames with per-frame repetition ids."""

    sample_rate_hz: float
    frames: np.ndarray
    rep_ids: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if abs(self.sample_rate_hz - 100.0) > 1e-9:
            raise ConfigError(
                f"envelope streams run at 100 Hz (Ts = 10 ms), got {self.sample_rate_hz} Hz"
            )
        if self.frames.ndim != 2:
            raise ConfigError("frames must be a [time x channels] matrix")
        if not np.all(np.isfinite(self.frames)) or np.any(self.frames < 0):
            raise ConfigError("envelope frames must be finite and nonnegative")
        if self.rep_ids is not None:
            self.rep_ids = np.asarray(self.rep_ids, dtype=np.int64)
            if self.rep_ids.shape != (self.frames.shape[0],):
                raise ConfigError("rep_ids must label every frame")

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Window:
    """One fixed-size block of envelope frames ending at end_index."""

    data: np.ndarray
    end_index: int


def window_stream(stream: EnvelopeStream, window_samples: int, hop: int = 1) -> list[Window]:
    """Slide a window of window_samples frames over the stream.

    End indices advance by hop; windows that would span a repetition
    boundary are dropped. Without boundaries the count is
    floor((len - window_samples) / hop) + 1; a too-short stream yields an
    empty list rather than an error.
    """
    if window_samples < 1 or hop < 1:
        raise ConfigError("window_samples and hop must be >= 1")
    frames = stream.frames
    n = frames.shape[0]
    out: list[Window] = []
    if window_samples > n:
        return out
    rep = stream.rep_ids
    for end in range(window_samples - 1, n, hop):
        start = end - window_samples + 1
        # rep_ids are non-decreasing, so equal endpoints mean one repetition
        if rep is not None and rep[start] != rep[end]:
            continue
        out.append(Window(data=frames[start : end + 1], end_index=end))
    return out


@dataclass(frozen=True)
class PreprocessConfig:
    """Parameters of the raw-EMG-to-envelope chain."""

    bandpass_low_hz: float = 5.0
    bandpass_high_hz: float = 500.0
    bandpass_order: int = 4
    notch_hz: float = 50.0
    notch_q: float = 30.0
    envelope_cutoff_hz: float = 5.0
    envelope_order: int = 2
    decim_factor: int = 24

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_kv(cls, raw: dict) -> "PreprocessConfig":
        kwargs = {}
        known = {f.name: f.type for f in fields(cls)}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"unknown preprocess key {key!r}")
            kwargs[key] = int(value) if known[key] == "int" else float(value)
        return cls(**kwargs)


def preprocess(rec: RawEmgRecording, chain: PreprocessConfig) -> EnvelopeStream:
    """Run the full chain: bandpass -> notch -> envelope -> decimate.

    The chain parameters are recorded in the output's metadata and the
    per-sample repetition ids are carried through decimation.
    """
    fs = rec.sample_rate_hz
    bandpass = design_filter(
        FilterSpec(
            kind="bandpass",
            low_cut_hz=chain.bandpass_low_hz,
            high_cut_hz=chain.bandpass_high_hz,
            order=chain.bandpass_order,
        ),
        fs,
    )
    notch = design_filter(FilterSpec(kind="notch", center_hz=chain.notch_hz, q=chain.notch_q), fs)
    x = apply_filter(bandpass, rec.samples)
    x = apply_filter(notch, x)
    env = envelope(
        x,
        FilterSpec(kind="lowpass", high_cut_hz=chain.envelope_cutoff_hz, order=chain.envelope_order),
        fs,
    )
    frames = decimate(env, chain.decim_factor)
    rep = decimate(rec.rep_ids, chain.decim_factor)
    return EnvelopeStream(
        sample_rate_hz=fs / chain.decim_factor,
        frames=frames,
        rep_ids=rep,
        meta=chain.as_dict(),
    )
