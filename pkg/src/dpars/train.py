"""Entropy-regularized L1 training with plain SGD.

The objective per batch is mean(|y_hat - y|_1) + lambda * sum over fingers
of mean attractor-state entropy; the mean over the batch keeps lambda's
scale independent of batch size. Model selection keeps the parameters from
the epoch with the lowest validation loss.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Node, Tape
from .dataset import TRAIN, VAL, LabeledDataset
from .errors import ConfigError, DivergenceError, NumericsError
from .model import (
    DparsConfig,
    DparsParams,
    ForwardTrace,
    GraphOutputs,
    forward_batch,
    forward_graph,
    param_shapes,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings. `lam` is the entropy weight.

    The default learning rate is deliberately small: the L1 objective has
    constant-magnitude sign gradients, and larger steps make saturated
    attractor logits random-walk late in training.
    """

    learning_rate: float = 0.0025
    lam: float = 0.02
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")

    @classmethod
    def from_kv(cls, raw: dict) -> "TrainConfig":
        kwargs: dict = {}
        types = {"learning_rate": float, "lambda": float, "batch_size": int,
                 "epochs": int, "seed": int, "shuffle": lambda v: v.lower() in ("1", "true", "yes")}
        for key, value in raw.items():
            if key not in types:
                raise ConfigError(f"unknown train config key {key!r}")
            kwargs["lam" if key == "lambda" else key] = types[key](value)
        return cls(**kwargs)


@dataclass
class EpochStats:
    train_loss: float
    val_loss: float
    val_r2: float
    mean_entropy: np.ndarray  # per finger


@dataclass
class TrainReport:
    """Per-epoch curves plus the selection outcome.

    wall_clock_s is intentionally left out of the serialized CSV so that
    identical runs produce byte-identical report files.
    """

    epochs: list[EpochStats]
    best_epoch: int
    lr_halvings: int
    learning_rate_used: float
    wall_clock_s: float

    def write_csv(self, path, manifest: Sequence[str] = ()) -> None:
        n_fingers = len(self.epochs[0].mean_entropy) if self.epochs else 0
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for line in manifest:
                fh.write(f"# {line}\n")
            fh.write(f"# best_epoch = {self.best_epoch}\n")
            fh.write(f"# lr_halvings = {self.lr_halvings}\n")
            fh.write(f"# learning_rate_used = {self.learning_rate_used!r}\n")
            cols = ["epoch", "train_loss", "val_loss", "val_r2"]
            cols += [f"mean_entropy_f{c}" for c in range(n_fingers)]
            fh.write(",".join(cols) + "\n")
            for i, ep in enumerate(self.epochs):
                row = [str(i), repr(ep.train_loss), repr(ep.val_loss), repr(ep.val_r2)]
                row += [repr(float(h)) for h in ep.mean_entropy]
                fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def entropy_of(p: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of one distribution or of each row."""
    logs = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -(p * logs).sum(axis=-1)


def loss(trace: ForwardTrace, target: np.ndarray, lam: float) -> float:
    """Objective for a single prediction: L1 error plus lambda times the
    summed attractor entropies."""
    l1 = float(np.sum(np.abs(trace.y - np.asarray(target, dtype=np.float64))))
    return l1 + lam * float(sum(entropy_of(p) for p in trace.probs))


def loss_graph(tape: Tape, outs: GraphOutputs, targets: np.ndarray, lam: float) -> Node:
    """Record the batch objective on the tape (mean over the batch)."""
    total = tape.l1_loss(outs.y, tape.constant(targets))
    if lam != 0.0:
        for p in outs.probs:
            total = tape.add(total, tape.scale(lam, tape.entropy(p)))
    return total


def batch_objective(y: np.ndarray, probs: list[np.ndarray], targets: np.ndarray, lam: float) -> float:
    """Numpy value of the same objective, for forward-only evaluation."""
    value = float(np.mean(np.sum(np.abs(y - targets), axis=1)))
    if lam != 0.0:
        value += lam * float(sum(entropy_of(p).mean() for p in probs))
    return value


# ---------------------------------------------------------------------------
# Optimizer and initialization
# ---------------------------------------------------------------------------


def sgd_step(params: DparsParams, learning_rate: float) -> None:
    """theta <- theta - lr * grad; plain SGD, no momentum, no weight decay."""
    for p in params.parameters():
        if not np.all(np.isfinite(p.grad)):
            raise NumericsError(f"non-finite gradient for parameter '{p.name}'")
        p.data -= learning_rate * p.grad


def init_params(config: DparsConfig, seed: int) -> DparsParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, seeded."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config):
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return DparsParams.from_arrays(config, arrays)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _epoch_batches(n: int, batch_size: int, order: np.ndarray):
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def _run_epoch(params: DparsParams, dataset: LabeledDataset, ends: np.ndarray,
               order: np.ndarray, lr: float, lam: float, batch_size: int, epoch: int) -> float:
    total, count = 0.0, 0
    for batch in _epoch_batches(len(ends), batch_size, order):
        batch_ends = ends[batch]
        x = dataset.gather_normalized(batch_ends)
        targets = dataset.frame_targets[batch_ends]
        tape = Tape()
        try:
            outs = forward_graph(tape, params, [x[:, t, :] for t in range(dataset.t_seq)])
            loss_node = loss_graph(tape, outs, targets, lam)
            for p in params.parameters():
                p.zero_grad()
            tape.backward(loss_node)
            sgd_step(params, lr)
        except NumericsError as err:
            raise DivergenceError(epoch, str(err)) from err
        total += float(loss_node.data) * len(batch)
        count += len(batch)
    return total / count


def _forward_eval(params: DparsParams, dataset: LabeledDataset, ends: np.ndarray, lam: float):
    x = dataset.gather_normalized(ends)
    targets = dataset.frame_targets[ends]
    outs = forward_batch(x, params)
    value = batch_objective(outs.y, outs.probs, targets, lam)
    return value, outs, targets


def train_loop(
    dataset: LabeledDataset,
    model_config: DparsConfig,
    train_config: TrainConfig,
    init: Optional[DparsParams] = None,
) -> tuple[DparsParams, TrainReport]:
    """Train with seeded shuffling and keep the epoch with the lowest
    validation loss.

    If the train loss fails to decrease over the first epoch, the learning
    rate is halved and training restarts, up to three times; the halvings
    are recorded in the report.
    """
    from .evaluate import r2_scores  # local import: evaluate pulls in this module

    t0 = time.perf_counter()
    train_ends = dataset.split_indices(TRAIN)
    val_ends = dataset.split_indices(VAL)
    if len(train_ends) == 0 or len(val_ends) == 0:
        raise ConfigError("train and validation splits must both be non-empty")

    cfg = train_config
    lr = cfg.learning_rate
    halvings = 0
    params = None
    rng = None
    first_epoch_loss = float("nan")
    for attempt in range(4):
        params = init.copy() if init is not None else init_params(model_config, cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        start_loss, _, _ = _forward_eval(params, dataset, train_ends, cfg.lam)
        order = rng.permutation(len(train_ends)) if cfg.shuffle else np.arange(len(train_ends))
        first_epoch_loss = _run_epoch(params, dataset, train_ends, order, lr, cfg.lam,
                                      cfg.batch_size, epoch=0)
        end_loss, _, _ = _forward_eval(params, dataset, train_ends, cfg.lam)
        if end_loss < start_loss or attempt == 3:
            if end_loss >= start_loss:
                log.warning("train loss did not decrease in epoch 1 even after %d halvings", halvings)
            break
        lr *= 0.5
        halvings += 1
        log.info("first-epoch loss %.4f -> %.4f not decreasing; halving lr to %g",
                 start_loss, end_loss, lr)

    def _val_stats(epoch: int) -> EpochStats:
        val_loss, outs, targets = _forward_eval(params, dataset, val_ends, cfg.lam)
        if not np.isfinite(val_loss):
            raise DivergenceError(epoch, "validation loss is not finite")
        r2 = r2_scores(outs.y, targets)
        entropies = np.array([entropy_of(p).mean() for p in outs.probs])
        return EpochStats(train_loss=float("nan"), val_loss=val_loss,
                          val_r2=r2.mean_r2, mean_entropy=entropies)

    stats = _val_stats(0)
    stats.train_loss = first_epoch_loss
    epoch_stats = [stats]
    best_epoch = 0
    best_val = stats.val_loss
    best_params = params.copy()

    for epoch in range(1, cfg.epochs):
        order = rng.permutation(len(train_ends)) if cfg.shuffle else np.arange(len(train_ends))
        train_loss = _run_epoch(params, dataset, train_ends, order, lr, cfg.lam,
                                cfg.batch_size, epoch)
        stats = _val_stats(epoch)
        stats.train_loss = train_loss
        epoch_stats.append(stats)
        if stats.val_loss < best_val:
            best_val = stats.val_loss
            best_epoch = epoch
            best_params = params.copy()

    report = TrainReport(
        epochs=epoch_stats,
        best_epoch=best_epoch,
        lr_halvings=halvings,
        learning_rate_used=lr,
        wall_clock_s=time.perf_counter() - t0,
    )
    return best_params, report
