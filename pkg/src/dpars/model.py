"""Dual-prediction decoder.

Pipeline per prediction: encode each of the last t_seq envelope frames with
a bias-free linear map, score every lag against the newest encoding with one
shared two-layer tanh network, softmax the scores into attention
coefficients, form the context vector as the coefficient-weighted sum of
encodings, expand it, then for each finger (a) softmax an attractor head
over discrete angle states and read out the probability-weighted state value
(coarse estimate) and (b) add an unbounded refinement regressor output.

Three execution paths compute the same math:
  * forward / StreamingState: plain-numpy single-window inference. Both
    encode frame-by-frame with identical ops, so a replayed stream matches
    per-window batch inference bit for bit.
  * forward_batch: vectorized numpy inference over stacked windows.
  * forward_graph: tape-recorded batched forward for training.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields
from typing import Iterator, Optional, Sequence

import numpy as np

from .autodiff import Node, Parameter, Tape
from .errors import ConfigError

REFINEMENT_INPUTS = ("context", "expansion")


@dataclass(frozen=True)
class DparsConfig:
    """Architecture dimensions; defaults are the shipped 64-channel decoder."""

    c_in: int = 64
    d_enc: int = 10
    t_seq: int = 20
    h_atn: int = 10
    d_exp: int = 24
    h_attr: int = 20
    n_states: int = 11
    angle_min: float = 90.0
    angle_max: float = 180.0
    n_fingers: int = 6
    h_refn: int = 18
    refinement_input: str = "context"

    def __post_init__(self) -> None:
        for name in ("c_in", "d_enc", "t_seq", "h_atn", "d_exp", "h_attr", "h_refn", "n_fingers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_states < 2:
            raise ConfigError("n_states must be >= 2")
        if not self.angle_min < self.angle_max:
            raise ConfigError("angle_min must be < angle_max")
        if self.refinement_input not in REFINEMENT_INPUTS:
            raise ConfigError(f"refinement_input must be one of {REFINEMENT_INPUTS}")

    def states(self) -> np.ndarray:
        """The discrete angle states, evenly spaced over [angle_min, angle_max]."""
        return np.linspace(self.angle_min, self.angle_max, self.n_states)

    @property
    def refn_in(self) -> int:
        return self.d_enc if self.refinement_input == "context" else self.d_exp

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_kv(cls, raw: dict) -> "DparsConfig":
        kwargs: dict = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in raw.items():
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            if types[key] == "int":
                kwargs[key] = int(value)
            elif types[key] == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


@dataclass
class HeadParams:
    """One two-layer head (hidden tanh layer plus linear output)."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter


@dataclass
class DparsParams:
    """Every learnable array of the decoder, plus per-finger attractor supports.

    attr_support[c] holds the indices (into config.states()) that finger c's
    attractor head still scores; the full range before pruning.
    """

    config: DparsConfig
    enc_w: Parameter
    atn_w1: Parameter
    atn_b1: Parameter
    atn_w2: Parameter
    atn_b2: Parameter
    exp_w: Parameter
    exp_b: Parameter
    attr: list[HeadParams]
    refn: list[HeadParams]
    attr_support: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.attr_support:
            self.attr_support = [
                np.arange(self.config.n_states) for _ in range(self.config.n_fingers)
            ]

    def parameters(self) -> Iterator[Parameter]:
        yield self.enc_w
        yield from (self.atn_w1, self.atn_b1, self.atn_w2, self.atn_b2)
        yield from (self.exp_w, self.exp_b)
        for head in self.attr:
            yield from (head.w1, head.b1, head.w2, head.b2)
        for head in self.refn:
            yield from (head.w1, head.b1, head.w2, head.b2)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def finger_states(self, c: int) -> np.ndarray:
        return self.config.states()[self.attr_support[c]]

    def copy(self) -> "DparsParams":
        return DparsParams.from_arrays(
            self.config,
            {name: arr.copy() for name, arr in self.named_arrays().items()},
            support=[s.copy() for s in self.attr_support],
        )

    @classmethod
    def from_arrays(
        cls,
        config: DparsConfig,
        arrays: dict[str, np.ndarray],
        support: Optional[list[np.ndarray]] = None,
    ) -> "DparsParams":
        support = support or [np.arange(config.n_states) for _ in range(config.n_fingers)]
        expected = dict(param_shapes(config))
        for c in range(config.n_fingers):
            s = len(support[c])
            expected[f"attr{c}.w2"] = (s, config.h_attr)
            expected[f"attr{c}.b2"] = (s,)
        if set(arrays) != set(expected):
            missing = set(expected) - set(arrays)
            extra = set(arrays) - set(expected)
            raise ConfigError(f"parameter arrays mismatch (missing={missing}, extra={extra})")
        params: dict[str, Parameter] = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
            params[name] = Parameter(arr, name)
        attr = [
            HeadParams(params[f"attr{c}.w1"], params[f"attr{c}.b1"],
                       params[f"attr{c}.w2"], params[f"attr{c}.b2"])
            for c in range(config.n_fingers)
        ]
        refn = [
            HeadParams(params[f"refn{c}.w1"], params[f"refn{c}.b1"],
                       params[f"refn{c}.w2"], params[f"refn{c}.b2"])
            for c in range(config.n_fingers)
        ]
        return cls(
            config=config,
            enc_w=params["enc.w"],
            atn_w1=params["atn.w1"], atn_b1=params["atn.b1"],
            atn_w2=params["atn.w2"], atn_b2=params["atn.b2"],
            exp_w=params["exp.w"], exp_b=params["exp.b"],
            attr=attr, refn=refn,
            attr_support=[np.asarray(s, dtype=np.int64) for s in support],
        )


def param_shapes(config: DparsConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Name and dense shape of every parameter array, in creation order."""
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("enc.w", (config.d_enc, config.c_in)),
        ("atn.w1", (config.h_atn, 2 * config.d_enc)),
        ("atn.b1", (config.h_atn,)),
        ("atn.w2", (1, config.h_atn)),
        ("atn.b2", (1,)),
        ("exp.w", (config.d_exp, config.d_enc)),
        ("exp.b", (config.d_exp,)),
    ]
    for c in range(config.n_fingers):
        shapes += [
            (f"attr{c}.w1", (config.h_attr, config.d_exp)),
            (f"attr{c}.b1", (config.h_attr,)),
            (f"attr{c}.w2", (config.n_states, config.h_attr)),
            (f"attr{c}.b2", (config.n_states,)),
        ]
    for c in range(config.n_fingers):
        shapes += [
            (f"refn{c}.w1", (config.h_refn, config.refn_in)),
            (f"refn{c}.b1", (config.h_refn,)),
            (f"refn{c}.w2", (1, config.h_refn)),
            (f"refn{c}.b2", (1,)),
        ]
    return shapes


@dataclass(frozen=True)
class ParamCount:
    """Analytic parameter count per stage."""

    encoder: int
    attention: int
    expansion: int
    attractor: int
    refinement: int

    @property
    def total(self) -> int:
        return self.encoder + self.attention + self.expansion + self.attractor + self.refinement

    def as_dict(self) -> dict[str, int]:
        return {
            "encoder": self.encoder,
            "attention": self.attention,
            "expansion": self.expansion,
            "attractor": self.attractor,
            "refinement": self.refinement,
            "total": self.total,
        }


def param_count(config: DparsConfig) -> ParamCount:
    """Closed-form parameter count per stage (dense heads)."""
    f = config.n_fingers
    return ParamCount(
        encoder=config.c_in * config.d_enc,
        attention=2 * config.d_enc * config.h_atn + config.h_atn + config.h_atn + 1,
        expansion=config.d_enc * config.d_exp + config.d_exp,
        attractor=f * (config.d_exp * config.h_attr + config.h_attr
                       + config.h_attr * config.n_states + config.n_states),
        refinement=f * (config.refn_in * config.h_refn + config.h_refn + config.h_refn + 1),
    )


# ---------------------------------------------------------------------------
# Inference (plain numpy)
# ---------------------------------------------------------------------------


class MacCounter:
    """Counts one multiply-accumulate per multiply in matvecs, weighted sums,
    and state expectations; activation functions and bias adds are free."""

    def __init__(self) -> None:
        self.by_stage: dict[str, int] = {}

    def add(self, stage: str, n: int) -> None:
        self.by_stage[stage] = self.by_stage.get(stage, 0) + n

    @property
    def total(self) -> int:
        return sum(self.by_stage.values())


@dataclass
class ForwardTrace:
    """Every intermediate of one prediction."""

    z_enc: np.ndarray  # [t_seq, d_enc], chronological
    scores: np.ndarray  # [t_seq], by lag (0 = newest frame)
    alpha: np.ndarray  # [t_seq], by lag; sums to 1
    z_atn: np.ndarray  # [d_enc]
    expansion: np.ndarray  # [d_exp]
    probs: list[np.ndarray]  # per finger, [n_support_states]
    y_attr: np.ndarray  # [n_fingers]
    y_refn: np.ndarray  # [n_fingers]
    y: np.ndarray  # [n_fingers]
    end_index: Optional[int] = None


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def encode(frame: np.ndarray, params: DparsParams, counter: Optional[MacCounter] = None) -> np.ndarray:
    """Bias-free linear compression of one frame: [c_in] -> [d_enc]."""
    cfg = params.config
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (cfg.c_in,):
        raise ConfigError(f"encode: expected frame of {cfg.c_in} channels, got {frame.shape}")
    if counter is not None:
        counter.add("encoder", cfg.c_in * cfg.d_enc)
    return params.enc_w.data @ frame


def attention_score(z_prev: np.ndarray, z_now: np.ndarray, params: DparsParams) -> float:
    """Shared-weight score of one (lagged, current) encoding pair."""
    h = np.tanh(params.atn_w1.data @ np.concatenate((z_prev, z_now)) + params.atn_b1.data)
    return float((params.atn_w2.data @ h)[0] + params.atn_b2.data[0])


def attention_context(
    z_history: np.ndarray, params: DparsParams, counter: Optional[MacCounter] = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score all lags against the newest encoding and build the context vector.

    z_history is [t_seq, d_enc] in chronological order. Returns
    (scores, alpha, z_atn) where index j refers to lag j (0 = newest).
    """
    cfg = params.config
    if z_history.shape != (cfg.t_seq, cfg.d_enc):
        raise ConfigError(
            f"attention_context: need exactly {cfg.t_seq} encodings, got {z_history.shape}"
        )
    z_now = z_history[-1]
    scores = np.empty(cfg.t_seq)
    for j in range(cfg.t_seq):
        scores[j] = attention_score(z_history[cfg.t_seq - 1 - j], z_now, params)
    alpha = _softmax(scores)
    z_atn = alpha @ z_history[::-1]
    if counter is not None:
        counter.add("attention", cfg.t_seq * (2 * cfg.d_enc * cfg.h_atn + cfg.h_atn))
        counter.add("attention", cfg.t_seq * cfg.d_enc)
    return scores, alpha, z_atn


def expand(z_atn: np.ndarray, params: DparsParams, counter: Optional[MacCounter] = None) -> np.ndarray:
    """Map the context vector to the wider attractor feature space."""
    cfg = params.config
    if counter is not None:
        counter.add("expansion", cfg.d_enc * cfg.d_exp)
    return np.tanh(params.exp_w.data @ z_atn + params.exp_b.data)


def attractor_head(
    e: np.ndarray, c: int, params: DparsParams, counter: Optional[MacCounter] = None
) -> tuple[np.ndarray, float]:
    """Finger c's state distribution and its probability-weighted angle."""
    cfg = params.config
    head = params.attr[c]
    states = params.finger_states(c)
    h = np.tanh(head.w1.data @ e + head.b1.data)
    p = _softmax(head.w2.data @ h + head.b2.data)
    # clip guards float spill a few ulp past the state hull
    y = float(np.clip(p @ states, states.min(), states.max()))
    if counter is not None:
        s = len(states)
        counter.add("attractor_hidden", cfg.d_exp * cfg.h_attr)
        counter.add("attractor_output", cfg.h_attr * s + s)
    return p, y


def refine(x: np.ndarray, c: int, params: DparsParams, counter: Optional[MacCounter] = None) -> float:
    """Finger c's unbounded fine correction."""
    cfg = params.config
    head = params.refn[c]
    h = np.tanh(head.w1.data @ x + head.b1.data)
    if counter is not None:
        counter.add("refinement", cfg.refn_in * cfg.h_refn + cfg.h_refn)
    return float((head.w2.data @ h)[0] + head.b2.data[0])


def _trace_from_history(
    z_history: np.ndarray,
    params: DparsParams,
    end_index: Optional[int],
    counter: Optional[MacCounter] = None,
) -> ForwardTrace:
    cfg = params.config
    scores, alpha, z_atn = attention_context(z_history, params, counter)
    e = expand(z_atn, params, counter)
    refn_in = z_atn if cfg.refinement_input == "context" else e
    probs: list[np.ndarray] = []
    y_attr = np.empty(cfg.n_fingers)
    y_refn = np.empty(cfg.n_fingers)
    for c in range(cfg.n_fingers):
        p, y_attr[c] = attractor_head(e, c, params, counter)
        probs.append(p)
        y_refn[c] = refine(refn_in, c, params, counter)
    return ForwardTrace(
        z_enc=z_history, scores=scores, alpha=alpha, z_atn=z_atn, expansion=e,
        probs=probs, y_attr=y_attr, y_refn=y_refn, y=y_attr + y_refn,
        end_index=end_index,
    )


def forward(window_data: np.ndarray, params: DparsParams,
            end_index: Optional[int] = None) -> ForwardTrace:
    """Full forward pass over one [t_seq, c_in] window."""
    cfg = params.config
    window_data = np.asarray(window_data, dtype=np.float64)
    if window_data.shape != (cfg.t_seq, cfg.c_in):
        raise ConfigError(
            f"forward: window geometry {window_data.shape} does not match "
            f"({cfg.t_seq}, {cfg.c_in})"
        )
    z_history = np.empty((cfg.t_seq, cfg.d_enc))
    for t in range(cfg.t_seq):
        z_history[t] = encode(window_data[t], params)
    return _trace_from_history(z_history, params, end_index)


class StreamingState:
    """Ring buffer of encoded frames for real-time prediction.

    Each frame is encoded exactly once and reused across the overlapping
    windows; a trace is emitted from the t_seq-th frame onward.
    """

    def __init__(self, params: DparsParams) -> None:
        self.params = params
        self._buf: deque[np.ndarray] = deque(maxlen=params.config.t_seq)
        self._frames_seen = 0

    def reset(self) -> None:
        self._buf.clear()
        self._frames_seen = 0

    def step(self, frame: np.ndarray, counter: Optional[MacCounter] = None) -> Optional[ForwardTrace]:
        self._buf.append(encode(frame, self.params, counter))
        self._frames_seen += 1
        if len(self._buf) < self.params.config.t_seq:
            return None
        z_history = np.array(self._buf)
        return _trace_from_history(z_history, self.params, self._frames_seen - 1, counter)


# ---------------------------------------------------------------------------
# Vectorized batch inference
# ---------------------------------------------------------------------------


@dataclass
class BatchOutputs:
    """Stacked forward results over N windows."""

    y: np.ndarray  # [N, n_fingers]
    y_attr: np.ndarray
    y_refn: np.ndarray
    alpha: np.ndarray  # [N, t_seq], lag-indexed
    probs: list[np.ndarray]  # per finger, [N, n_support_states]


def forward_batch(windows: np.ndarray, params: DparsParams, chunk: int = 1024) -> BatchOutputs:
    """Vectorized inference over [N, t_seq, c_in] windows."""
    cfg = params.config
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1:] != (cfg.t_seq, cfg.c_in):
        raise ConfigError(f"forward_batch: bad window stack shape {windows.shape}")
    n = windows.shape[0]
    y = np.empty((n, cfg.n_fingers))
    y_attr = np.empty((n, cfg.n_fingers))
    y_refn = np.empty((n, cfg.n_fingers))
    alpha_all = np.empty((n, cfg.t_seq))
    probs_all = [np.empty((n, len(params.attr_support[c]))) for c in range(cfg.n_fingers)]
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        x = windows[lo:hi]
        b = hi - lo
        z = (x.reshape(b * cfg.t_seq, cfg.c_in) @ params.enc_w.data.T).reshape(b, cfg.t_seq, cfg.d_enc)
        z_lag = z[:, ::-1, :]  # index j along axis 1 = lag j
        z_now = np.broadcast_to(z[:, -1:, :], z_lag.shape)
        pairs = np.concatenate([z_lag, z_now], axis=2)
        h = np.tanh(pairs @ params.atn_w1.data.T + params.atn_b1.data)
        scores = (h @ params.atn_w2.data.T)[:, :, 0] + params.atn_b2.data[0]
        alpha = _softmax(scores)
        z_atn = np.einsum("bt,btd->bd", alpha, z_lag)
        e = np.tanh(z_atn @ params.exp_w.data.T + params.exp_b.data)
        refn_in = z_atn if cfg.refinement_input == "context" else e
        alpha_all[lo:hi] = alpha
        for c in range(cfg.n_fingers):
            head = params.attr[c]
            states = params.finger_states(c)
            hh = np.tanh(e @ head.w1.data.T + head.b1.data)
            p = _softmax(hh @ head.w2.data.T + head.b2.data)
            probs_all[c][lo:hi] = p
            y_attr[lo:hi, c] = np.clip(p @ states, states.min(), states.max())
            rhead = params.refn[c]
            rh = np.tanh(refn_in @ rhead.w1.data.T + rhead.b1.data)
            y_refn[lo:hi, c] = (rh @ rhead.w2.data.T)[:, 0] + rhead.b2.data[0]
        y[lo:hi] = y_attr[lo:hi] + y_refn[lo:hi]
    return BatchOutputs(y=y, y_attr=y_attr, y_refn=y_refn, alpha=alpha_all, probs=probs_all)


# ---------------------------------------------------------------------------
# Tape-recorded forward for training
# ---------------------------------------------------------------------------


@dataclass
class GraphOutputs:
    """Graph nodes of one recorded forward pass."""

    y: Node
    y_attr: Node
    y_refn: Node
    alpha: Node
    probs: list[Node]


def forward_graph(tape: Tape, params: DparsParams, lag_frames: Sequence[np.ndarray]) -> GraphOutputs:
    """Record the forward pass on a tape.

    lag_frames lists the window's frames in chronological order; each entry
    is [c_in] or batched [B, c_in].
    """
    cfg = params.config
    if len(lag_frames) != cfg.t_seq:
        raise ConfigError(f"forward_graph: need {cfg.t_seq} frames, got {len(lag_frames)}")
    z = [tape.matvec(params.enc_w, tape.constant(f)) for f in lag_frames]
    z_now = z[-1]
    score_cols = []
    for j in range(cfg.t_seq):
        pair = tape.concat([z[cfg.t_seq - 1 - j], z_now])
        h = tape.tanh(tape.add(tape.matvec(params.atn_w1, pair), params.atn_b1))
        score_cols.append(tape.add(tape.matvec(params.atn_w2, h), params.atn_b2))
    alpha = tape.softmax(tape.concat(score_cols))
    z_atn = tape.weighted_sum(alpha, [z[cfg.t_seq - 1 - j] for j in range(cfg.t_seq)])
    e = tape.tanh(tape.add(tape.matvec(params.exp_w, z_atn), params.exp_b))
    refn_in = z_atn if cfg.refinement_input == "context" else e
    probs: list[Node] = []
    attr_cols = []
    refn_cols = []
    for c in range(cfg.n_fingers):
        head = params.attr[c]
        h = tape.tanh(tape.add(tape.matvec(head.w1, e), head.b1))
        p = tape.softmax(tape.add(tape.matvec(head.w2, h), head.b2))
        probs.append(p)
        states_row = tape.constant(params.finger_states(c)[None, :])
        attr_cols.append(tape.matvec(states_row, p))
        rhead = params.refn[c]
        rh = tape.tanh(tape.add(tape.matvec(rhead.w1, refn_in), rhead.b1))
        refn_cols.append(tape.add(tape.matvec(rhead.w2, rh), rhead.b2))
    y_attr = tape.concat(attr_cols)
    y_refn = tape.concat(refn_cols)
    y = tape.add(y_attr, y_refn)
    return GraphOutputs(y=y, y_attr=y_attr, y_refn=y_refn, alpha=alpha, probs=probs)
