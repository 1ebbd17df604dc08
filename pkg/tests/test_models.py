import math

import numpy as np
import pytest
from scipy.optimize import minimize

from lidfl import Batch, ModelSpec, accuracy, estimate_loss_profile, gradient, gradient_descent, loss
from lidfl.models import smoothness_bound


def finite_difference(spec, w, batch, coords, step=1e-5):
    """Independent central-difference gradient on selected coordinates."""
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        wp, wm = w.copy(), w.copy()
        wp[c] += step
        wm[c] -= step
        out[i] = (loss(spec, wp, batch) - loss(spec, wm, batch)) / (2 * step)
    return out


class TestLoss:
    def test_zero_params_give_log_m(self, small_batch):
        spec = ModelSpec("softmax-regression", 4, 3, l2=0.0)
        assert loss(spec, np.zeros(spec.param_dim), small_batch) == pytest.approx(math.log(3), abs=1e-12)

    def test_zero_params_binary(self):
        spec = ModelSpec("softmax-regression", 2, 2, l2=0.0)
        batch = Batch(np.ones((5, 2)), np.array([0, 1, 0, 1, 1]))
        assert loss(spec, np.zeros(spec.param_dim), batch) == pytest.approx(math.log(2), abs=1e-12)

    def test_dominant_logit_leaves_only_regularizer(self):
        # correct-class logit ahead by 50: cross-entropy is ~e-50, leaving l2/2*||w||^2
        spec = ModelSpec("softmax-regression", 1, 2, l2=0.01)
        batch = Batch(np.array([[1.0]]), np.array([0]))
        w = np.array([50.0, 0.0, 0.0, 0.0])  # weights (2x1) then biases (2)
        assert loss(spec, w, batch) == pytest.approx(0.5 * spec.l2 * np.dot(w, w), abs=1e-10)

    def test_empty_batch_rejected(self, softmax_spec):
        with pytest.raises(ValueError):
            loss(softmax_spec, np.zeros(softmax_spec.param_dim), Batch(np.zeros((0, 4)), np.zeros(0, dtype=int)))

    def test_mlp_loss_at_zero_is_log_m(self, mlp_spec, small_batch):
        spec = ModelSpec("mlp", 4, 3, hidden=5, l2=0.0)
        assert loss(spec, np.zeros(spec.param_dim), small_batch) == pytest.approx(math.log(3), abs=1e-12)


class TestGradient:
    @pytest.mark.parametrize("kind,hidden", [("softmax-regression", 0), ("mlp", 5)])
    def test_finite_difference_agreement(self, small_batch, kind, hidden):
        spec = ModelSpec(kind, 4, 3, hidden=hidden, l2=0.01)
        gen = np.random.default_rng(5)
        for _ in range(10):
            w = gen.standard_normal(spec.param_dim)
            g = gradient(spec, w, small_batch)
            coords = gen.choice(spec.param_dim, size=min(20, spec.param_dim), replace=False)
            fd = finite_difference(spec, w, small_batch, coords)
            assert np.allclose(fd, g[coords], rtol=1e-5, atol=1e-8)

    def test_regularizer_is_linear(self, small_batch):
        reg = ModelSpec("softmax-regression", 4, 3, l2=0.05)
        no_reg = ModelSpec("softmax-regression", 4, 3, l2=0.0)
        w = np.random.default_rng(3).standard_normal(reg.param_dim)
        diff = gradient(reg, w, small_batch) - gradient(no_reg, w, small_batch)
        assert np.allclose(diff, 0.05 * w, rtol=0, atol=1e-15)

    def test_vanishes_at_independent_minimum(self, mixture_batch):
        # scipy minimizes our loss with its own numerical gradient; ours must vanish there
        spec = ModelSpec("softmax-regression", 4, 3, l2=0.01)
        res = minimize(
            lambda w: loss(spec, w, mixture_batch),
            np.zeros(spec.param_dim),
            method="L-BFGS-B",
            options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-9},
        )
        assert np.linalg.norm(gradient(spec, res.x, mixture_batch)) <= 1e-5

    def test_dimension_mismatch(self, softmax_spec, small_batch):
        with pytest.raises(Exception):
            gradient(softmax_spec, np.zeros(3), small_batch)


class TestAccuracy:
    def test_tie_breaks_toward_lowest_class(self, softmax_spec):
        batch = Batch(np.random.default_rng(0).standard_normal((8, 4)), np.zeros(8, dtype=int))
        assert accuracy(softmax_spec, np.zeros(softmax_spec.param_dim), batch) == 1.0

    def test_separable_data_fits_perfectly(self, mixture_batch):
        spec = ModelSpec("softmax-regression", 4, 3, l2=0.0)
        w = gradient_descent(spec, mixture_batch, steps=500, lr=0.5)
        assert accuracy(spec, w, mixture_batch) == 1.0

    def test_adversarial_labels_score_near_chance(self):
        gen = np.random.default_rng(9)
        x = gen.standard_normal((1000, 4))
        y = gen.integers(3, size=1000)
        spec = ModelSpec("softmax-regression", 4, 3, l2=0.01)
        w = gradient_descent(spec, Batch(x, y), steps=200, lr=0.2)
        permuted = Batch(x, (y + 1) % 3)
        assert accuracy(spec, w, permuted) <= 1 / 3 + 0.1


class TestLossProfile:
    def test_alpha_is_the_regularizer(self, small_batch):
        spec = ModelSpec("softmax-regression", 4, 3, l2=0.01)
        prof = estimate_loss_profile(spec, small_batch, trials=20)
        assert prof.alpha == 0.01 and prof.convex

    def test_alpha_at_most_beta(self, small_batch, softmax_spec):
        prof = estimate_loss_profile(softmax_spec, small_batch, trials=20)
        assert prof.alpha <= prof.beta

    def test_beta_grows_with_trials_on_fixed_stream(self, small_batch, softmax_spec):
        betas = [
            estimate_loss_profile(softmax_spec, small_batch, trials=t, rng=np.random.default_rng(4)).beta
            for t in (10, 30, 60)
        ]
        assert betas[0] <= betas[1] <= betas[2]

    def test_mlp_is_flagged_nonconvex(self, mlp_spec, small_batch):
        prof = estimate_loss_profile(mlp_spec, small_batch, trials=10)
        assert prof.alpha == 0.0 and not prof.convex

    def test_empirical_beta_below_analytic_bound(self, small_batch, softmax_spec):
        prof = estimate_loss_profile(softmax_spec, small_batch, trials=50)
        assert prof.beta <= smoothness_bound(softmax_spec, small_batch)


class TestConvexityProperties:
    def test_strong_convexity_inequality(self, small_batch):
        spec = ModelSpec("softmax-regression", 4, 3, l2=0.01)
        gen = np.random.default_rng(17)
        for _ in range(200):
            wa = gen.standard_normal(spec.param_dim)
            wb = gen.standard_normal(spec.param_dim)
            b = gen.uniform()
            lhs = b * loss(spec, wa, small_batch) + (1 - b) * loss(spec, wb, small_batch)
            gap = spec.l2 * b * (1 - b) / 2 * np.linalg.norm(wa - wb) ** 2
            rhs = loss(spec, b * wa + (1 - b) * wb, small_batch) + gap
            assert lhs >= rhs - 1e-9

    def test_smoothness_of_sampled_pairs(self, small_batch, softmax_spec):
        gen = np.random.default_rng(4)
        prof = estimate_loss_profile(softmax_spec, small_batch, trials=30, rng=np.random.default_rng(4))
        for _ in range(30):
            wa = gen.standard_normal(softmax_spec.param_dim)
            wb = gen.standard_normal(softmax_spec.param_dim)
            lhs = np.linalg.norm(gradient(softmax_spec, wa, small_batch) - gradient(softmax_spec, wb, small_batch))
            assert lhs <= prof.beta * np.linalg.norm(wa - wb) + 1e-12
