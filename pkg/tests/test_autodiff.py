import numpy as np
import pytest

from geodenoise import autodiff as ad
from geodenoise.autodiff import (
    Tensor,
    adam_step,
    backward,
    cosine_lr,
    finite_diff_check,
    init_adam,
)


class TestBackwardBasics:
    def test_square_at_three(self):
        x = Tensor(3.0)
        backward(ad.square(x))
        assert x.grad == pytest.approx(6.0)

    def test_product_rule(self):
        x, y = Tensor(2.0), Tensor(5.0)
        backward(ad.mul(x, y))
        assert x.grad == pytest.approx(5.0)
        assert y.grad == pytest.approx(2.0)

    def test_fan_in_accumulation(self):
        x = Tensor(np.arange(3.0))
        backward(ad.sum_(ad.concat([x, x], axis=0)))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_unreachable_leaf_gets_zero(self):
        x, y = Tensor(np.ones(4)), Tensor(np.ones(4))
        backward(ad.sum_(ad.square(x)))
        np.testing.assert_array_equal(y.grad, np.zeros(4))

    def test_rejects_non_scalar_output(self):
        with pytest.raises(ValueError, match="scalar"):
            backward(Tensor(np.ones(3)))

    def test_diamond_graph_visits_once(self):
        x = Tensor(2.0)
        a = ad.square(x)       # x^2
        out = ad.add(ad.mul(a, a), a)  # x^4 + x^2
        backward(out)
        assert x.grad == pytest.approx(4 * 2.0**3 + 2 * 2.0)

    def test_nan_in_forward_raises(self):
        with pytest.raises(FloatingPointError):
            ad.log_(Tensor(-1.0))

    def test_operator_sugar(self):
        x, y = Tensor(3.0), Tensor(4.0)
        out = (x * y + x / y - 2.0) * 1.0
        backward(out)
        assert x.grad == pytest.approx(4.0 + 0.25)
        assert y.grad == pytest.approx(3.0 - 3.0 / 16.0)


class TestBackwardLinearity:
    @pytest.mark.parametrize("a,b", [(2.0, 3.0), (-1.5, 0.25)])
    def test_linear_combination(self, a, b):
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal(5)

        def f(t):
            return ad.sum_(ad.square(t))

        def g(t):
            return ad.sum_(ad.shifted_softplus(t))

        x = Tensor(x0)
        backward(f(x))
        grad_f = x.grad.copy()
        x = Tensor(x0)
        backward(g(x))
        grad_g = x.grad.copy()
        x = Tensor(x0)
        backward(ad.add(ad.mul(f(x), a), ad.mul(g(x), b)))
        np.testing.assert_allclose(x.grad, a * grad_f + b * grad_g, rtol=1e-12)


class TestFiniteDiffCheck:
    def test_quadratic_is_near_exact(self):
        x = Tensor(3.0)
        err = finite_diff_check(lambda t: ad.square(t), [x], epsilon=1e-5)
        assert err < 1e-8

    def test_two_layer_mlp_17_params(self):
        rng = np.random.default_rng(4)
        w1 = Tensor(rng.standard_normal((2, 3)) * 0.5)
        b1 = Tensor(rng.standard_normal(3) * 0.1)
        w2 = Tensor(rng.standard_normal((3, 2)) * 0.5)
        b2 = Tensor(rng.standard_normal(2) * 0.1)
        x = rng.standard_normal((4, 2))

        def f(w1, b1, w2, b2):
            hidden = ad.shifted_softplus(ad.add(ad.matmul(x, w1), b1))
            return ad.sum_(ad.add(ad.matmul(hidden, w2), b2))

        assert sum(t.data.size for t in (w1, b1, w2, b2)) == 17
        assert finite_diff_check(f, [w1, b1, w2, b2], epsilon=1e-5) < 1e-4

    def test_restores_leaf_values(self):
        x = Tensor(np.array([1.0, 2.0]))
        before = x.data.copy()
        finite_diff_check(lambda t: ad.sum_(ad.square(t)), [x])
        np.testing.assert_array_equal(x.data, before)

    def test_rejects_bad_epsilon(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda t: ad.square(t), [Tensor(1.0)], epsilon=0.0)

    @pytest.mark.parametrize(
        "op",
        [
            lambda t: ad.sum_(ad.exp_(t)),
            lambda t: ad.sum_(ad.log_(ad.add(ad.square(t), 1.0))),
            lambda t: ad.sum_(ad.sigmoid(t)),
            lambda t: ad.sum_(ad.log_sigmoid(t)),
            lambda t: ad.sum_(ad.sqrt_(ad.add(ad.square(t), 0.5))),
            lambda t: ad.sum_(ad.power(ad.add(ad.square(t), 1.0), 1.5)),
            lambda t: ad.sum_(ad.shifted_softplus(t)),
        ],
    )
    def test_smooth_ops(self, op):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal(6))
        assert finite_diff_check(op, [x], epsilon=1e-5) < 1e-6

    @pytest.mark.parametrize(
        "op",
        [
            lambda t: ad.sum_(ad.square(t)),
            lambda t: ad.mean_(ad.mul(t, t)),
            lambda t: ad.sum_(ad.mul(ad.add(t, 2.0), ad.sub(t, 1.0))),
            lambda t: ad.sum_(ad.square(ad.mean_(ad.reshape(t, (2, 3)), axis=1))),
            lambda t: ad.sum_(ad.square(ad.concat([t, t], axis=0))),
        ],
    )
    def test_polynomial_ops_near_exact(self, op):
        # central differences are exact for quadratics up to rounding
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal(6))
        assert finite_diff_check(op, [x], epsilon=1e-5) < 1e-8

    def test_gather_scatter(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((5, 2)))
        idx = np.array([0, 3, 3, 1])

        def f(t):
            picked = ad.gather(t, idx)
            spread = ad.scatter_add(picked, np.array([0, 1, 1, 0]), 2)
            return ad.sum_(ad.square(spread))

        assert finite_diff_check(f, [x], epsilon=1e-5) < 1e-6

    def test_stop_gradient_blocks(self):
        x = Tensor(np.array([1.0, 2.0]))
        backward(ad.sum_(ad.mul(ad.stop_gradient(x), x)))
        np.testing.assert_allclose(x.grad, x.data)  # only the live branch


class TestAdam:
    def _single(self, value=1.0):
        params = {"w": np.array([value])}
        return params, init_adam(params)

    def test_zero_gradient_fixed_point(self):
        params, state = self._single()
        for _ in range(10):
            adam_step(state, params, {"w": np.zeros(1)}, lr=0.1)
        assert params["w"][0] == 1.0

    def test_first_step_magnitude_is_lr(self):
        params, state = self._single(0.0)
        adam_step(state, params, {"w": np.ones(1)}, lr=0.1)
        assert params["w"][0] == pytest.approx(-0.1, rel=1e-6)

    def test_shape_mismatch_rejected(self):
        params, state = self._single()
        with pytest.raises(ValueError, match="shape"):
            adam_step(state, params, {"w": np.zeros((2, 2))}, lr=0.1)

    def test_bit_identical_trajectories(self):
        def run():
            rng = np.random.default_rng(5)
            params = {"w": rng.standard_normal(4)}
            state = init_adam(params)
            for _ in range(25):
                adam_step(state, params, {"w": rng.standard_normal(4)}, lr=0.01)
            return params["w"]

        assert np.array_equal(run(), run())

    def test_lr_zero_is_noop(self):
        params, state = self._single()
        adam_step(state, params, {"w": np.ones(1)}, lr=0.0)
        assert params["w"][0] == 1.0


class TestCosineLr:
    def test_start_is_lr_max(self):
        assert cosine_lr(0, 100, 5e-4) == pytest.approx(5e-4)

    def test_end_is_lr_min(self):
        assert cosine_lr(100, 100, 5e-4, 1e-5) == pytest.approx(1e-5)

    def test_midpoint(self):
        assert cosine_lr(50, 100, 5e-4, 0.0) == pytest.approx(2.5e-4)

    def test_rejects_step_past_total(self):
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 5e-4)

    def test_rejects_zero_total(self):
        with pytest.raises(ValueError):
            cosine_lr(0, 0, 5e-4)


class TestTensorBasics:
    def test_grad_default_zero(self):
        t = Tensor(np.ones((2, 2)))
        np.testing.assert_array_equal(t.grad, np.zeros((2, 2)))

    def test_data_is_float64(self):
        assert Tensor([1, 2, 3]).data.dtype == np.float64

    def test_item(self):
        assert Tensor(2.5).item() == 2.5
