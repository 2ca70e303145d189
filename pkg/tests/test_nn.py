import numpy as np
import pytest

from oranslice.errors import NumericalFailure, ShapeError, StaleCacheError
from oranslice.nn import (
    AdamState,
    DenseNet,
    LstmStack,
    adam_step,
    apply_adam,
    dense_backward,
    dense_forward,
    load_checkpoint,
    lstm_backward,
    lstm_forward,
    save_checkpoint,
)

from gradcheck import numeric_grad, rel_error


def random_dense(rng, ensemble=None):
    widths = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(2, 5)))]
    acts = [str(rng.choice(["tanh", "linear"])) for _ in widths[1:]]
    return DenseNet.init(widths, rng, acts, ensemble=ensemble)


def dense_check(rng, ensemble=None) -> float:
    net = random_dense(rng, ensemble)
    batch = int(rng.integers(1, 4))
    shape = (batch, net.in_dim) if ensemble is None else (ensemble, batch, net.in_dim)
    x = rng.normal(size=shape)
    y, _ = dense_forward(net, x)
    w = rng.normal(size=y.shape)

    def loss():
        return float(np.sum(dense_forward(net, x)[0] * w))

    _, cache = dense_forward(net, x)
    dx, grads = dense_backward(net, cache, w)
    worst = rel_error(dx, numeric_grad(loss, x))
    for p, g in zip(net.params(), grads):
        worst = max(worst, rel_error(g, numeric_grad(loss, p)))
    return worst


def lstm_check(rng, steps=3) -> float:
    stack = LstmStack.init(int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3)),
                           int(rng.integers(1, 3)), rng)
    x = rng.normal(size=(2, steps, stack.in_dim))
    w = rng.normal(size=(2, steps, stack.out_dim))

    def loss():
        return float(np.sum(lstm_forward(stack, x)[0] * w))

    _, cache = lstm_forward(stack, x)
    grads, dx = lstm_backward(stack, cache, w)
    worst = rel_error(dx, numeric_grad(loss, x))
    for p, g in zip(stack.params(), grads):
        worst = max(worst, rel_error(g, numeric_grad(loss, p)))
    return worst


class TestDense:
    def test_zero_net_gives_zero(self):
        net = DenseNet([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)], ["tanh", "linear"])
        y, _ = dense_forward(net, np.array([1.0, -2.0, 3.0]))
        assert np.all(y == 0.0)

    def test_identity_linear(self):
        net = DenseNet([np.eye(3)], [np.zeros(3)], ["linear"])
        x = np.array([0.3, -1.2, 5.0])
        np.testing.assert_array_equal(dense_forward(net, x)[0], x)

    def test_forward_is_pure(self):
        rng = np.random.default_rng(1)
        net = DenseNet.init([4, 8, 3], rng)
        x = rng.normal(size=(5, 4))
        before = [p.copy() for p in net.params()]
        a, _ = dense_forward(net, x)
        b, _ = dense_forward(net, x)
        np.testing.assert_array_equal(a, b)
        for p, q in zip(before, net.params()):
            np.testing.assert_array_equal(p, q)

    @pytest.mark.parametrize("ensemble", [None, 3])
    def test_finite_differences(self, ensemble):
        rng = np.random.default_rng(123 if ensemble is None else 321)
        for _ in range(100):
            assert dense_check(rng, ensemble) < 1e-4

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(2)
        net = DenseNet.init([3, 5, 2], rng)
        y, cache = dense_forward(net, rng.normal(size=(4, 3)))
        dx, grads = dense_backward(net, cache, np.zeros_like(y))
        assert not np.any(dx) and all(not np.any(g) for g in grads)

    def test_backward_linear_in_dy(self):
        rng = np.random.default_rng(3)
        net = DenseNet.init([3, 5, 2], rng)
        y, cache = dense_forward(net, rng.normal(size=(4, 3)))
        dy = rng.normal(size=y.shape)
        dx1, g1 = dense_backward(net, cache, dy)
        dx2, g2 = dense_backward(net, cache, 2 * dy)
        np.testing.assert_allclose(dx2, 2 * dx1, rtol=1e-12)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(b, 2 * a, rtol=1e-12)

    def test_shape_mismatch(self):
        net = DenseNet.init([3, 2], np.random.default_rng(0))
        with pytest.raises(ShapeError):
            dense_forward(net, np.zeros(4))

    def test_stale_cache(self):
        rng = np.random.default_rng(4)
        net = DenseNet.init([3, 2], rng)
        y, cache = dense_forward(net, rng.normal(size=(2, 3)))
        _, grads = dense_backward(net, cache, np.ones_like(y))
        apply_adam(net, grads, AdamState())
        with pytest.raises(StaleCacheError):
            dense_backward(net, cache, np.ones_like(y))

    def test_ensemble_members_are_independent(self):
        rng = np.random.default_rng(5)
        ens = DenseNet.init([3, 4, 2], rng, ensemble=2)
        x = rng.normal(size=(2, 6, 3))
        y, _ = dense_forward(ens, x)
        for e in range(2):
            single = DenseNet([w[e] for w in ens.weights], [b[e, 0] for b in ens.biases], ens.activations)
            np.testing.assert_allclose(dense_forward(single, x[e])[0], y[e], rtol=1e-13)


class TestLstm:
    def test_zero_weights_output_bias(self):
        rng = np.random.default_rng(0)
        stack = LstmStack.init(4, 5, 3, 2, rng)
        for layer in stack.layers:
            for p in layer:
                p[...] = 0.0
        stack.w_out[...] = 0.0
        y, _ = lstm_forward(stack, rng.normal(size=(6, 4)))
        np.testing.assert_array_equal(y, np.broadcast_to(stack.b_out, y.shape))

    def test_forget_gate_closed_forgets_history(self):
        rng = np.random.default_rng(1)
        stack = LstmStack.init(3, 4, 2, 1, rng)
        stack.layers[0][2][:4] = -1e3  # forget bias
        stack.layers[0][1][...] = 0.0  # cut h_{t-1} so only the cell path could carry history
        a = rng.normal(size=(5, 3))
        b = a.copy()
        b[:4] = rng.normal(size=(4, 3))  # different history, same last input
        _, ca = lstm_forward(stack, a)
        _, cb = lstm_forward(stack, b)
        assert np.all(ca.gates[0][:, :, :4] < 1e-300)
        np.testing.assert_array_equal(ca.cells[0][:, -1], cb.cells[0][:, -1])
        assert not np.allclose(ca.cells[0][:, -2], cb.cells[0][:, -2])

    def test_lookback_18(self):
        stack = LstmStack.init(42, 50, 42, 2, np.random.default_rng(2))
        y, _ = lstm_forward(stack, np.zeros((7, 18, 42)))
        assert y.shape == (7, 18, 42)

    def test_finite_differences(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            assert lstm_check(rng) < 1e-4

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(3)
        stack = LstmStack.init(2, 3, 2, 2, rng)
        y, cache = lstm_forward(stack, rng.normal(size=(4, 2)))
        grads, dx = lstm_backward(stack, cache, np.zeros_like(y))
        assert not np.any(dx) and all(not np.any(g) for g in grads)

    def test_causality(self):
        rng = np.random.default_rng(4)
        stack = LstmStack.init(2, 3, 2, 2, rng)
        y, cache = lstm_forward(stack, rng.normal(size=(6, 2)))
        dy = np.zeros_like(y)
        dy[2] = 1.0
        _, dx = lstm_backward(stack, cache, dy)
        assert not np.any(dx[3:])
        assert np.any(dx[:3])

    def test_shape_mismatch(self):
        stack = LstmStack.init(2, 3, 2, 1, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            lstm_forward(stack, np.zeros((4, 3)))
        with pytest.raises(ShapeError):
            lstm_forward(stack, np.zeros((0, 2)))


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = [np.array([1.0, -2.0])]
        adam_step(p, [np.zeros(2)], AdamState())
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_first_step_magnitude(self):
        # m_hat = g and v_hat = g^2 at t=1, so the step is lr * g / (|g| + eps)
        g = np.array([0.5, -3.0, 1e-2])
        p = [np.zeros(3)]
        st = AdamState(lr=1e-4)
        adam_step(p, [g], st)
        expected = -1e-4 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p[0], expected, rtol=1e-12)
        np.testing.assert_allclose(np.abs(p[0]), 1e-4, rtol=1e-5)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(9)
            p = [rng.normal(size=(3, 2))]
            st = AdamState(lr=1e-2)
            for _ in range(20):
                adam_step(p, [np.sin(p[0])], st)
            return p[0]
        np.testing.assert_array_equal(run(), run())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState())

    def test_nan_detection(self):
        net = DenseNet.init([2, 2], np.random.default_rng(0))
        grads = [np.full((2, 2), np.nan), np.zeros(2)]
        with pytest.raises(NumericalFailure):
            apply_adam(net, grads, AdamState())


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    net = DenseNet.init([3, 4, 2], rng, ensemble=2)
    path = tmp_path / "net.json"
    save_checkpoint(path, dict(net.named_params()))
    other = DenseNet.init([3, 4, 2], np.random.default_rng(1), ensemble=2)
    other.load(load_checkpoint(path))
    for a, b in zip(net.params(), other.params()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"magic": "nope", "version": 1, "tensors": []}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
