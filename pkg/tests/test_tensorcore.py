import math

import numpy as np
import pytest

from pqvae.tensorcore import (
    AdamW,
    AdamWHyper,
    AdamWState,
    NonFiniteError,
    ShapeError,
    Tensor,
    activation,
    adamw_step,
    affine,
    backward,
    concat,
    elu,
    gather_rows,
    mean,
    no_grad,
    reshape,
    square,
    stop_gradient,
    tanh,
)

from helpers import numeric_grad, rel_error


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


class TestAffine:
    def test_identity(self):
        y = affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [[1.0, 2.0]])

    def test_zero_input_passes_bias(self):
        W = np.random.default_rng(0).standard_normal((2, 2))
        y = affine(Tensor([[0.0, 0.0]]), Tensor(W), Tensor([3.0, -1.0]))
        np.testing.assert_array_equal(y.data, [[3.0, -1.0]])

    def test_shape_errors_name_dimensions(self):
        with pytest.raises(ShapeError, match="input width 3"):
            affine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)))
        with pytest.raises(ShapeError, match="bias length"):
            affine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))), Tensor(np.zeros(5)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x, W, b = leaf(rng.uniform(-2, 2, (3, 4))), leaf(rng.uniform(-2, 2, (4, 5))), leaf(rng.uniform(-2, 2, 5))
        c = rng.standard_normal((3, 5))

        def f():
            return float((affine(x, W, b).data * c).sum())

        loss = (affine(x, W, b) * Tensor(c)).sum()
        backward(loss)
        num = numeric_grad(f, [x.data, W.data, b.data])
        assert rel_error([x.grad, W.grad, b.grad], num) < 1e-6


class TestActivations:
    def test_elu_values(self):
        assert elu(Tensor(0.0)).item() == 0.0
        assert elu(Tensor(-1.0)).item() == pytest.approx(math.exp(-1) - 1, abs=1e-12)
        assert elu(Tensor(2.5)).item() == 2.5

    def test_tanh_zero(self):
        assert tanh(Tensor(0.0)).item() == 0.0

    def test_dispatch(self):
        assert activation("ELU", Tensor(-1.0)).item() == pytest.approx(-0.63212, abs=1e-5)
        with pytest.raises(ValueError):
            activation("relu", Tensor(1.0))


class TestStopGradient:
    def test_forward_identity(self):
        np.testing.assert_array_equal(stop_gradient(Tensor([1.5])).data, [1.5])

    def test_product_with_one_branch_blocked(self):
        x = leaf(3.0)
        backward(stop_gradient(x) * x)
        assert x.grad == 3.0

    def test_fully_blocked_is_zero(self):
        x = leaf([1.0, 2.0, 3.0])
        y = (stop_gradient(x)).sum() + (x * 0.0).sum()
        backward(y)
        assert np.array_equal(x.grad, np.zeros(3))


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(4.0).reshape(2, 2))
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_squared_norm(self):
        x = leaf([1.0, -2.0])
        backward(square(x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, -4.0])

    def test_rejects_non_scalar(self):
        with pytest.raises(ValueError, match="scalar"):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_rejects_non_finite(self):
        x = leaf([1.0])
        with pytest.raises(NonFiniteError):
            backward((x * np.inf).sum())

    def test_repeatable_bitwise(self):
        rng = np.random.default_rng(3)
        W = leaf(rng.standard_normal((4, 3)))
        x = Tensor(rng.standard_normal((5, 4)))
        loss = mean(square(elu(affine(x, W, Tensor(np.zeros(3))))))
        backward(loss)
        first = W.grad.copy()
        W.zero_grad()
        backward(loss)
        assert np.array_equal(first, W.grad)

    def test_mlp_against_finite_differences(self):
        rng = np.random.default_rng(4)
        shapes = [(6, 10), (10,), (10, 10), (10,), (10, 3), (3,)]
        params = [leaf(rng.uniform(-1, 1, s)) for s in shapes]
        x = Tensor(rng.uniform(-2, 2, (7, 6)))
        target = rng.standard_normal((7, 3))

        def forward():
            h = elu(affine(x, params[0], params[1]))
            h = tanh(affine(h, params[2], params[3]))
            return mean(square(affine(h, params[4], params[5]) - Tensor(target)))

        assert sum(p.data.size for p in params) < 1000
        backward(forward())
        num = numeric_grad(lambda: forward().item(), [p.data for p in params])
        assert rel_error([p.grad for p in params], num) < 1e-4

    def test_reshape_concat_slice_gather(self):
        rng = np.random.default_rng(5)
        a = leaf(rng.standard_normal((4, 3)))
        table = leaf(rng.standard_normal((5, 2)))
        idx = np.array([0, 4, 4, 1])
        c = rng.standard_normal((2, 10))

        def forward():
            parts = concat([a[:, 1:], gather_rows(table, idx), a[:, :1]], axis=1)
            return (reshape(parts, (2, 10)) * Tensor(c)).sum()

        backward(forward())
        num = numeric_grad(lambda: forward().item(), [a.data, table.data])
        assert rel_error([a.grad, table.grad], num) < 1e-6

    def test_no_grad_records_nothing(self):
        x = leaf([1.0, 2.0])
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad


def test_every_op_matches_finite_differences_on_random_inputs():
    rng = np.random.default_rng(6)
    ops = [
        lambda a, b: (a * b).sum(),
        lambda a, b: mean(square(a - b)),
        lambda a, b: (elu(a) * b).sum(),
        lambda a, b: (tanh(a) + b).sum() * 0.5,
        lambda a, b: (affine(a, Tensor(np.ones((3, 2))), b[0, :2]) * 1.5).sum(),
        lambda a, b: (concat([a, b], axis=1)[:, 1:4] * 2.0).sum(),
    ]
    worst = 0.0
    for trial in range(100):
        op = ops[trial % len(ops)]
        a = leaf(rng.uniform(-2, 2, (4, 3)))
        b = leaf(rng.uniform(-2, 2, (4, 3)))
        backward(op(a, b))
        num = numeric_grad(lambda: op(a, b).item(), [a.data, b.data])
        worst = max(worst, rel_error([a.grad, b.grad], num))
    assert worst < 1e-4


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    x, W = rng.standard_normal((8, 5)), rng.standard_normal((5, 5))
    run = lambda: elu(affine(Tensor(x), Tensor(W), Tensor(np.zeros(5)))).data
    assert np.array_equal(run(), run())


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        p = [np.array([1.0, -2.0])]
        st = AdamWState.zeros_like(p)
        adamw_step(p, [np.zeros(2)], st, AdamWHyper(lr=0.01))
        np.testing.assert_array_equal(p[0], [1.0, -2.0])
        assert st.step == 1

    def test_hand_stepped_update(self):
        p = [np.array([1.0])]
        st = AdamWState.zeros_like(p)
        adamw_step(p, [np.array([1.0])], st, AdamWHyper(lr=0.01, beta1=0.9, beta2=0.95, eps=1e-8))
        assert st.m[0][0] == pytest.approx(0.1)
        assert st.v[0][0] == pytest.approx(0.05)
        assert p[0][0] == pytest.approx(1.0 - 0.01 / (1.0 + 1e-8), abs=1e-15)

    def test_decay_only_step(self):
        p = [np.array([2.0])]
        st = AdamWState.zeros_like(p)
        adamw_step(p, [np.array([0.0])], st, AdamWHyper(lr=0.01, weight_decay=0.1))
        assert p[0][0] == pytest.approx(1.998, abs=1e-15)

    def test_non_finite_gradient_aborts_without_change(self):
        p = [np.array([1.0])]
        st = AdamWState.zeros_like(p)
        with pytest.raises(NonFiniteError):
            adamw_step(p, [np.array([np.nan])], st, AdamWHyper())
        assert p[0][0] == 1.0 and st.step == 0

    def test_optimizer_drives_quadratic_down(self):
        x = leaf([3.0, -4.0])
        opt = AdamW([x], AdamWHyper(lr=0.1))
        for _ in range(200):
            opt.zero_grad()
            backward(square(x).sum())
            opt.step()
        assert np.abs(x.data).max() < 0.1
