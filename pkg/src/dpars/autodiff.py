"""Minimal reverse-mode differentiation core.

Covers exactly the operations the decoder graph needs, on float64 numpy
arrays of rank <= 2. Every op accepts either a single vector or a batch of
vectors (leading batch dimension); the two loss ops reduce batches by mean,
which keeps the objective batch-size invariant. Records are replayed in
reverse creation order, which is a valid topological order because an op's
inputs must exist before it runs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericsError, TapeError

__all__ = ["Node", "Parameter", "Tape"]


class Node:
    """A value in the computation graph. Leaves have no creator record."""

    __slots__ = ("data", "grad")

    def __init__(self, data) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(shape={self.data.shape})"


class Parameter(Node):
    """Named learnable tensor; its gradient persists across backward passes
    until explicitly zeroed (at the start of each optimizer step)."""

    __slots__ = ("name",)

    def __init__(self, data, name: str) -> None:
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _accum(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)  # copy: g may be a shared buffer
    else:
        node.grad += g


class Tape:
    """Ordered op records for one forward pass.

    One backward pass per forward pass; call reset() before reuse.
    """

    def __init__(self) -> None:
        self._records: list[tuple[str, Node, Callable[[np.ndarray], None]]] = []
        self._spent = False

    def reset(self) -> None:
        self._records.clear()
        self._spent = False

    def constant(self, data) -> Node:
        """Wrap an array as a graph leaf (no gradient of interest)."""
        return Node(data)

    def _emit(self, op: str, data: np.ndarray, backward) -> Node:
        # finite(sum) iff all entries finite; avoids materializing a bool array
        if not np.isfinite(np.sum(data)):
            raise NumericsError(f"non-finite output in op '{op}'")
        out = Node(data)
        self._records.append((op, out, backward))
        return out

    # -- operations ---------------------------------------------------------

    def matvec(self, w: Node, x: Node) -> Node:
        """w[m,n] @ x[n] -> [m], or batched x[B,n] -> [B,m]."""
        W, xd = w.data, x.data
        if W.ndim != 2:
            raise ValueError(f"matvec: weight must be rank 2, got {W.shape}")
        if xd.ndim not in (1, 2) or xd.shape[-1] != W.shape[1]:
            raise ValueError(f"matvec: shape mismatch {W.shape} x {xd.shape}")
        if xd.ndim == 1:
            out = W @ xd

            def backward(g: np.ndarray) -> None:
                _accum(w, np.outer(g, xd))
                _accum(x, W.T @ g)

        else:
            out = xd @ W.T

            def backward(g: np.ndarray) -> None:
                _accum(w, g.T @ xd)
                _accum(x, g @ W)

        return self._emit("matvec", out, backward)

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum; also accepts [B,m] + [m] (bias over a batch)."""
        ad, bd = a.data, b.data
        if ad.shape == bd.shape:

            def backward(g: np.ndarray) -> None:
                _accum(a, g)
                _accum(b, g)

        elif ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:

            def backward(g: np.ndarray) -> None:
                _accum(a, g)
                _accum(b, g.sum(axis=0))

        else:
            raise ValueError(f"add: shape mismatch {ad.shape} + {bd.shape}")
        return self._emit("add", ad + bd, backward)

    def concat(self, parts: Sequence[Node]) -> Node:
        """Concatenate along the last axis."""
        if not parts:
            raise ValueError("concat: need at least one input")
        arrs = [p.data for p in parts]
        ndim = arrs[0].ndim
        if any(a.ndim != ndim for a in arrs):
            raise ValueError("concat: mixed ranks")
        if ndim == 2 and any(a.shape[0] != arrs[0].shape[0] for a in arrs):
            raise ValueError("concat: batch sizes differ")
        widths = [a.shape[-1] for a in arrs]
        bounds = np.cumsum(widths)[:-1]

        def backward(g: np.ndarray) -> None:
            for part, piece in zip(parts, np.split(g, bounds, axis=-1)):
                _accum(part, piece)

        return self._emit("concat", np.concatenate(arrs, axis=-1), backward)

    def scale(self, c: float, x: Node) -> Node:
        """Multiply by a scalar constant."""
        c = float(c)

        def backward(g: np.ndarray) -> None:
            _accum(x, c * g)

        return self._emit("scale", c * x.data, backward)

    def tanh(self, x: Node) -> Node:
        out = np.tanh(x.data)

        def backward(g: np.ndarray) -> None:
            _accum(x, g * (1.0 - out * out))

        return self._emit("tanh", out, backward)

    def softmax(self, x: Node) -> Node:
        """Stable softmax over the last axis; rows sum to 1."""
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

        def backward(g: np.ndarray) -> None:
            inner = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, y * (g - inner))

        return self._emit("softmax", y, backward)

    def weighted_sum(self, weights: Node, vectors: Sequence[Node]) -> Node:
        """sum_j weights[j] * vectors[j]; batched form weighs per row."""
        k = len(vectors)
        if k < 1:
            raise ValueError("weighted_sum: need at least one vector")
        wd = weights.data
        vecs = [v.data for v in vectors]
        if wd.ndim == 1:
            if wd.shape != (k,) or any(v.ndim != 1 or v.shape != vecs[0].shape for v in vecs):
                raise ValueError("weighted_sum: shape mismatch")
            out = np.zeros_like(vecs[0])
            for j in range(k):
                out += wd[j] * vecs[j]

            def backward(g: np.ndarray) -> None:
                _accum(weights, np.array([g @ vecs[j] for j in range(k)]))
                for j in range(k):
                    _accum(vectors[j], wd[j] * g)

        elif wd.ndim == 2:
            if wd.shape[1] != k or any(
                v.ndim != 2 or v.shape != vecs[0].shape or v.shape[0] != wd.shape[0]
                for v in vecs
            ):
                raise ValueError("weighted_sum: shape mismatch")
            out = np.zeros_like(vecs[0])
            for j in range(k):
                out += wd[:, j : j + 1] * vecs[j]

            def backward(g: np.ndarray) -> None:
                gw = np.empty_like(wd)
                for j in range(k):
                    gw[:, j] = (g * vecs[j]).sum(axis=1)
                    _accum(vectors[j], wd[:, j : j + 1] * g)
                _accum(weights, gw)

        else:
            raise ValueError("weighted_sum: weights must be rank 1 or 2")
        return self._emit("weighted_sum", out, backward)

    def l1_loss(self, pred: Node, target: Node) -> Node:
        """Sum of absolute differences; batched input reduces by mean over
        rows. The target is treated as a constant; sign(0) is 0."""
        d = pred.data - target.data
        if d.shape != pred.data.shape or pred.data.shape != target.data.shape:
            raise ValueError("l1_loss: shape mismatch")
        if d.ndim == 1:
            out = np.sum(np.abs(d))
            inv = 1.0
        elif d.ndim == 2:
            inv = 1.0 / d.shape[0]
            out = np.sum(np.abs(d)) * inv
        else:
            raise ValueError("l1_loss: inputs must be rank 1 or 2")
        sgn = np.sign(d)

        def backward(g: np.ndarray) -> None:
            _accum(pred, g * inv * sgn)

        return self._emit("l1_loss", np.asarray(out), backward)

    def entropy(self, p: Node) -> Node:
        """Shannon entropy -sum p ln p with 0 ln 0 := 0 (natural log).

        Batched input returns the mean entropy over rows. Callers are
        responsible for the simplex constraint; only nonnegativity is
        checked so the op stays differentiable coordinate-wise.
        """
        pd = p.data
        if np.any(pd < 0):
            raise NumericsError("entropy: negative probability")
        logs = np.where(pd > 0, np.log(np.where(pd > 0, pd, 1.0)), 0.0)
        total = -np.sum(pd * logs)
        if pd.ndim == 1:
            inv = 1.0
        elif pd.ndim == 2:
            inv = 1.0 / pd.shape[0]
        else:
            raise ValueError("entropy: input must be rank 1 or 2")

        def backward(g: np.ndarray) -> None:
            local = np.where(pd > 0, -(logs + 1.0), 0.0)
            _accum(p, g * inv * local)

        return self._emit("entropy", np.asarray(total * inv), backward)

    # -- reverse pass ---------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(node) into .grad for every node reachable
        from loss. Deterministic: fixed replay order, fixed reductions."""
        if self._spent:
            raise TapeError("tape already consumed; reset() before reuse")
        if not self._records:
            raise TapeError("backward before forward: tape has no records")
        if loss.data.shape != ():
            raise TapeError(f"backward root must be a scalar, got shape {loss.data.shape}")
        if not any(loss is rec[1] for rec in self._records):
            raise TapeError("loss node was not produced by this tape")
        self._spent = True
        loss.grad = np.ones(())
        for _op, out, backward in reversed(self._records):
            if out.grad is not None:
                backward(out.grad)
