"""Tensor engine: forward semantics, backward rules, gradient checks."""

import numpy as np
import pytest

import multiflow.tensor as T
from multiflow.tensor import Tensor, backward, grad_check


def fd_grad(f, x, h=1e-5):
    """Independent central-difference gradient, used to validate grad_check itself."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = f(x)
        flat[i] = saved - h
        down = f(x)
        flat[i] = saved
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


class TestMatmul:
    def test_identity(self):
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_allclose((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_error_names_both(self):
        with pytest.raises(T.ShapeError, match=r"2, 3"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)
        loss = T.tsum(T.mul(a @ b, a @ b))
        backward(loss)
        c = (a.data @ b.data)
        np.testing.assert_allclose(a.grad, 2 * c @ b.data.T, rtol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ (2 * c), rtol=1e-12)

    def test_batched(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3, 4, 5))
        b = rng.normal(size=(2, 3, 5, 6))
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_closed_form(self):
        out = T.softmax(Tensor([np.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], rtol=1e-12)

    def test_shift_invariance(self):
        x = np.random.default_rng(2).normal(size=(5,))
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(3).normal(size=(4, 7))
        out = T.softmax(Tensor(x), axis=1).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-12)


class TestElementwise:
    def test_silu_at_zero(self):
        assert T.silu(Tensor(0.0)).item() == 0.0

    def test_layer_norm_constant_vector(self):
        out = T.layer_norm(Tensor(np.full(8, 3.7)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_layer_norm_moments(self):
        x = np.random.default_rng(4).normal(2.0, 3.0, size=(6, 10))
        out = T.layer_norm(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_concat_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((2, 5)))
        assert T.concat([a, b], axis=1).shape == (2, 8)

    def test_concat_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 5)))], axis=1)

    def test_log_domain(self):
        with pytest.raises(T.DomainError):
            T.log(Tensor([-1.0]))

    def test_sqrt_domain(self):
        with pytest.raises(T.DomainError):
            T.sqrt(Tensor([-0.5]))

    def test_broadcast_rules(self):
        a = Tensor(np.ones((2, 3)))
        assert T.add(a, 1.0).shape == (2, 3)                  # scalar
        assert T.add(a, Tensor(np.ones(3))).shape == (2, 3)   # trailing suffix
        with pytest.raises(T.ShapeError):
            T.add(a, Tensor(np.ones((2, 1))))                 # inner expansion refused

    def test_broadcast_grad_sums(self):
        a = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        backward(T.tsum(T.mul(a, b)))
        np.testing.assert_array_equal(b.grad, np.full(3, 4.0))
        np.testing.assert_array_equal(a.grad, np.ones((4, 3)))

    def test_unit_normalize(self):
        x = np.random.default_rng(5).normal(size=(3, 9))
        out = T.unit_normalize(Tensor(x), axis=1).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, rtol=1e-9)


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        backward(T.mul(x, x))
        assert x.grad == pytest.approx(6.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        a_val = rng.uniform(-2, 2, (4, 3))
        x = Tensor(rng.uniform(-2, 2, (3, 2)), requires_grad=True)
        a = Tensor(a_val)
        loss = T.tsum(T.mul(a @ x, a @ x))
        backward(loss)

        def f(xv):
            c = a_val @ xv
            return float(np.sum(c * c))

        fd = fd_grad(f, x.data.copy())
        rel = np.abs(x.grad - fd) / np.maximum(1.0, np.abs(fd))
        assert rel.max() < 1e-4

    def test_no_grad_leaf(self):
        x = Tensor(2.0, requires_grad=False)
        y = Tensor(3.0, requires_grad=True)
        backward(T.mul(x, y))
        assert x.grad is None
        assert y.grad == pytest.approx(2.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(T.ShapeError):
            backward(T.mul(x, x))

    def test_accumulation(self):
        x = Tensor(3.0, requires_grad=True)
        backward(T.mul(x, x))
        backward(T.mul(x, x))
        assert x.grad == pytest.approx(12.0)

    def test_each_rule_runs_once(self):
        x = Tensor(np.ones(4), requires_grad=True)
        y = T.mul(x, x)      # op 1
        z = T.add(y, y)      # op 2, diamond on y
        loss = T.tsum(z)     # op 3
        assert len(T.Graph(loss)) == 3
        calls = backward(loss)
        assert calls == 3
        np.testing.assert_array_equal(x.grad, np.full(4, 4.0))

    def test_forward_deterministic(self):
        x = np.random.default_rng(7).normal(size=(5, 5))
        a = T.softmax(T.silu(Tensor(x)), axis=1).data
        b = T.softmax(T.silu(Tensor(x)), axis=1).data
        np.testing.assert_array_equal(a, b)


class TestGradCheck:
    def test_linear_is_exact(self):
        x = Tensor(np.random.default_rng(8).uniform(-2, 2, (6,)))
        assert grad_check(T.tsum, x) < 1e-10

    def test_softmax_weighted_sum(self):
        x = Tensor(np.random.default_rng(9).uniform(-2, 2, (8,)))
        err = grad_check(lambda t: T.tsum(T.mul(T.softmax(t), t)), x)
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_primitive_suite(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-2, 2, (3, 4)))
        xpos = Tensor(rng.uniform(0.5, 2, (3, 4)))
        w = rng.uniform(-2, 2, (4, 3))
        cases = [
            lambda t: T.tsum(T.mul(t, t)),
            lambda t: T.tsum(T.exp(T.mul(t, 0.3))),
            lambda t: T.tsum(T.silu(t)),
            lambda t: T.tsum(T.sigmoid(t)),
            lambda t: T.tmean(T.softmax(t, axis=1)[0]),
            lambda t: T.tsum(T.mul(T.layer_norm(t, axis=1), Tensor(w.T))),
            lambda t: T.tsum(T.matmul(t, Tensor(w))),
            lambda t: T.tsum(T.transpose(t)[1]),
            lambda t: T.tsum(T.concat([t, T.mul(t, 2.0)], axis=0)[2:4]),
            lambda t: T.tmean(T.broadcast_to(T.tmean(t, axis=1, keepdims=True), (3, 4))),
            lambda t: T.tsum(T.mul(T.unit_normalize(t, axis=1), Tensor(w.T))),
            lambda t: T.tsum(T.clamp(t, -1.0, 1.5)),
        ]
        for f in cases:
            assert grad_check(f, x) < 1e-4
        for f in (lambda t: T.tsum(T.log(t)), lambda t: T.tsum(T.sqrt(t))):
            assert grad_check(f, xpos) < 1e-4

    def test_conv_and_pool(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        w = Tensor(rng.uniform(-1, 1, (5, 3, 3, 3)))
        b = Tensor(rng.uniform(-1, 1, (5,)))

        def f_x(t):
            return T.tsum(T.mul(T.conv2d(t, w, b), 0.1))

        def f_w(t):
            return T.tsum(T.mul(T.conv2d(x, t, b), 0.1))

        assert grad_check(f_x, x) < 1e-4
        assert grad_check(f_w, w) < 1e-4
        assert grad_check(lambda t: T.tsum(T.avg_pool2d(T.mul(t, t))), x) < 1e-4
        assert grad_check(lambda t: T.tsum(T.mul(T.upsample2d(t), 0.5)), x) < 1e-4

    def test_take_rows(self):
        table = Tensor(np.random.default_rng(11).normal(size=(7, 4)))
        ids = np.array([1, 1, 3, 6])
        err = grad_check(lambda t: T.tsum(T.mul(T.take_rows(t, ids), T.take_rows(t, ids))), table)
        assert err < 1e-4


class TestFloat32Mode:
    def test_training_mode_matches_float64(self):
        rng = np.random.default_rng(12)
        xv = rng.uniform(-2, 2, (4, 4))
        wv = rng.uniform(-1, 1, (4, 4))

        def run():
            x = Tensor(xv, requires_grad=True)
            loss = T.tsum(T.mul(T.silu(x @ Tensor(wv)), T.softmax(x, axis=1)))
            backward(loss)
            return np.asarray(x.grad, dtype=np.float64)

        g64 = run()
        T.set_default_dtype(np.float32)
        try:
            g32 = run()
        finally:
            T.set_default_dtype(np.float64)
        rel = np.abs(g32 - g64) / np.maximum(1.0, np.abs(g64))
        assert rel.max() < 1e-2
