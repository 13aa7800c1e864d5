"""Engine-level checks: op semantics, finite-difference oracles, tape contracts."""

import numpy as np
import pytest

from dpars.autodiff import Node, Parameter, Tape
from dpars.errors import NumericsError, TapeError


def finite_difference(f, arr, step=1e-5):
    """Central finite differences of scalar f with respect to arr, in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum.reduce([np.abs(a), np.abs(b), np.full_like(a, floor)])


def scalar_loss(node, tape):
    """Reduce any node to a scalar via l1 against zeros (so FD has one output)."""
    target = tape.constant(np.zeros_like(node.data))
    return tape.l1_loss(node, target)


class TestMatvec:
    def test_identity(self):
        tape = Tape()
        w = Parameter(np.eye(3), "w")
        x = tape.constant(np.array([1.0, -2.0, 3.0]))
        out = tape.matvec(w, x)
        assert np.array_equal(out.data, x.data)

    def test_zero_weights(self):
        tape = Tape()
        w = Parameter(np.zeros((2, 3)), "w")
        x = Node(np.array([1.0, 2.0, 3.0]))
        out = tape.matvec(w, x)
        loss = scalar_loss(out, tape)
        tape.backward(loss)
        assert np.all(out.data == 0)
        assert np.all(x.grad == 0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        w = Parameter(rng.standard_normal((3, 2)), "w")
        x = Parameter(rng.standard_normal(2), "x")

        def run():
            tape = Tape()
            out = tape.matvec(w, tape.tanh(Node(x.data)))
            # use squared-ish smooth path: tanh then l1 vs fixed target
            target = tape.constant(np.array([0.3, -0.2, 0.9]))
            return float(tape.l1_loss(out, target).data)

        tape = Tape()
        xn = Node(x.data)
        out = tape.matvec(w, tape.tanh(xn))
        target = tape.constant(np.array([0.3, -0.2, 0.9]))
        loss = tape.l1_loss(out, target)
        w.zero_grad()
        tape.backward(loss)
        fd = finite_difference(run, w.data)
        assert rel_err(w.grad, fd).max() < 1e-6

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(ValueError):
            tape.matvec(Parameter(np.zeros((2, 3)), "w"), Node(np.zeros(4)))

    def test_batched_matches_per_row(self):
        rng = np.random.default_rng(3)
        w = Parameter(rng.standard_normal((4, 3)), "w")
        xb = rng.standard_normal((5, 3))
        tape = Tape()
        out = tape.matvec(w, tape.constant(xb))
        rows = [Tape().matvec(w, Node(xb[i])).data for i in range(5)]
        assert np.allclose(out.data, np.stack(rows), rtol=0, atol=1e-15)


class TestActivations:
    def test_tanh_zero(self):
        tape = Tape()
        out = tape.tanh(Node(np.zeros(4)))
        assert np.all(out.data == 0)

    def test_softmax_uniform(self):
        tape = Tape()
        out = tape.softmax(Node(np.full(20, 1.7)))
        assert np.allclose(out.data, 0.05, rtol=0, atol=1e-15)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            tape = Tape()
            out = tape.softmax(Node(rng.standard_normal((4, 7)) * 10))
            assert out.data.min() >= 0
            assert np.abs(out.data.sum(axis=-1) - 1).max() < 1e-12

    def test_softmax_gradient(self):
        rng = np.random.default_rng(11)
        x = Parameter(rng.standard_normal(6), "x")
        coeffs = rng.standard_normal(6)

        def run():
            tape = Tape()
            out = tape.softmax(Node(x.data))
            target = tape.constant(coeffs)  # l1 against fixed target
            return float(tape.l1_loss(out, target).data)

        tape = Tape()
        out = tape.softmax(x)
        loss = tape.l1_loss(out, tape.constant(coeffs))
        x.zero_grad()
        tape.backward(loss)
        fd = finite_difference(run, x.data)
        assert rel_err(x.grad, fd).max() < 1e-6


class TestWeightedSum:
    def test_one_hot_selects(self):
        tape = Tape()
        vecs = [Node(np.array([1.0, 2.0])), Node(np.array([3.0, 4.0])), Node(np.array([5.0, 6.0]))]
        w = Node(np.array([0.0, 1.0, 0.0]))
        out = tape.weighted_sum(w, vecs)
        assert np.array_equal(out.data, vecs[1].data)

    def test_uniform_is_mean(self):
        tape = Tape()
        vecs = [Node(np.array([3.0, 0.0])), Node(np.array([0.0, 3.0])), Node(np.array([3.0, 3.0]))]
        out = tape.weighted_sum(Node(np.full(3, 1 / 3)), vecs)
        assert np.allclose(out.data, [2.0, 2.0])

    def test_gradient(self):
        rng = np.random.default_rng(5)
        w = Parameter(rng.standard_normal(3), "w")
        vs = [Parameter(rng.standard_normal(2), f"v{j}") for j in range(3)]
        target = rng.standard_normal(2)

        def run():
            tape = Tape()
            out = tape.weighted_sum(Node(w.data), [Node(v.data) for v in vs])
            return float(tape.l1_loss(out, tape.constant(target)).data)

        tape = Tape()
        out = tape.weighted_sum(w, vs)
        loss = tape.l1_loss(out, tape.constant(target))
        for p in [w] + vs:
            p.zero_grad()
        tape.backward(loss)
        assert rel_err(w.grad, finite_difference(run, w.data)).max() < 1e-6
        for v in vs:
            assert rel_err(v.grad, finite_difference(run, v.data)).max() < 1e-6


class TestLosses:
    def test_l1_zero_when_equal(self):
        tape = Tape()
        x = Node(np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
        assert float(tape.l1_loss(x, Node(x.data.copy())).data) == 0.0

    def test_l1_value(self):
        tape = Tape()
        pred = Node(np.array([1.0, -2.0, 0.0, 0.0, 0.0, 0.0]))
        target = Node(np.zeros(6))
        assert float(tape.l1_loss(pred, target).data) == 3.0

    def test_l1_gradient_is_sign(self):
        tape = Tape()
        pred = Parameter(np.array([2.0, -1.0, 0.0]), "p")
        target = tape.constant(np.zeros(3))
        loss = tape.l1_loss(pred, target)
        pred.zero_grad()
        tape.backward(loss)
        assert np.array_equal(pred.grad, np.array([1.0, -1.0, 0.0]))

    def test_l1_batch_mean(self):
        tape = Tape()
        pred = Node(np.array([[1.0, 0.0], [0.0, 3.0]]))
        target = Node(np.zeros((2, 2)))
        assert float(tape.l1_loss(pred, target).data) == pytest.approx(2.0)

    def test_entropy_one_hot(self):
        tape = Tape()
        p = np.zeros(11)
        p[3] = 1.0
        assert float(tape.entropy(Node(p)).data) == 0.0

    def test_entropy_uniform_eleven(self):
        tape = Tape()
        out = tape.entropy(Node(np.full(11, 1 / 11)))
        assert float(out.data) == pytest.approx(np.log(11), abs=1e-12)

    def test_entropy_rejects_negative(self):
        tape = Tape()
        with pytest.raises(NumericsError):
            tape.entropy(Node(np.array([0.5, 0.6, -0.1])))

    def test_entropy_gradient_interior(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.05, 1.0, 7)
        p /= p.sum()
        param = Parameter(p, "p")

        def run():
            return float(Tape().entropy(Node(param.data)).data)

        tape = Tape()
        loss = tape.entropy(param)
        param.zero_grad()
        tape.backward(loss)
        assert rel_err(param.grad, finite_difference(run, param.data)).max() < 1e-6


class TestTapeContracts:
    def _loss(self, tape, w, x):
        out = tape.matvec(w, x)
        return tape.l1_loss(out, tape.constant(np.zeros(out.data.shape)))

    def test_unused_parameter_gets_zero_gradient(self):
        tape = Tape()
        w = Parameter(np.ones((2, 2)), "w")
        unused = Parameter(np.ones(3), "unused")
        loss = self._loss(tape, w, Node(np.ones(2)))
        w.zero_grad()
        unused.zero_grad()
        tape.backward(loss)
        assert np.all(unused.grad == 0)
        assert np.any(w.grad != 0)

    def test_double_backward_errors(self):
        tape = Tape()
        w = Parameter(np.ones((2, 2)), "w")
        loss = self._loss(tape, w, Node(np.ones(2)))
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_reset_allows_reuse(self):
        tape = Tape()
        w = Parameter(np.ones((2, 2)), "w")
        loss = self._loss(tape, w, Node(np.ones(2)))
        tape.backward(loss)
        tape.reset()
        loss2 = self._loss(tape, w, Node(np.ones(2)))
        tape.backward(loss2)  # no error

    def test_backward_before_forward_errors(self):
        with pytest.raises(TapeError):
            Tape().backward(Node(np.asarray(0.0)))

    def test_non_scalar_root_errors(self):
        tape = Tape()
        out = tape.tanh(Node(np.ones(3)))
        with pytest.raises(TapeError):
            tape.backward(out)

    def test_foreign_loss_node_errors(self):
        tape = Tape()
        tape.tanh(Node(np.ones(3)))
        with pytest.raises(TapeError):
            tape.backward(Node(np.asarray(1.0)))

    def test_nan_input_names_op(self):
        tape = Tape()
        with pytest.raises(NumericsError, match="tanh"):
            tape.tanh(Node(np.array([1.0, np.nan])))

    def test_gradient_linearity(self):
        rng = np.random.default_rng(9)
        w = Parameter(rng.standard_normal((3, 3)), "w")
        x = np.abs(rng.standard_normal(3)) + 0.5
        t1 = rng.standard_normal(3)
        t2 = rng.standard_normal(3)
        a, b = 0.7, -1.3

        def grad_of(fn):
            tape = Tape()
            loss = fn(tape)
            w.zero_grad()
            tape.backward(loss)
            return w.grad.copy()

        def l1(tape):
            return tape.l1_loss(tape.matvec(w, Node(x)), tape.constant(t1))

        def l2(tape):
            return tape.entropy(tape.softmax(tape.matvec(w, Node(x))))

        def combined(tape):
            return tape.add(tape.scale(a, l1(tape)), tape.scale(b, l2(tape)))

        g1, g2, gc = grad_of(l1), grad_of(l2), grad_of(combined)
        assert np.allclose(gc, a * g1 + b * g2, rtol=1e-12, atol=1e-12)

    def test_determinism(self):
        rng = np.random.default_rng(4)
        wdata = rng.standard_normal((4, 4))
        x = rng.standard_normal(4)

        def run():
            w = Parameter(wdata.copy(), "w")
            tape = Tape()
            h = tape.tanh(tape.matvec(w, Node(x)))
            loss = tape.entropy(tape.softmax(h))
            tape.backward(loss)
            return float(loss.data), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)
