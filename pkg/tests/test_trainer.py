import numpy as np
import pytest

from lidfl import LocalTrainConfig, ModelSpec, batch_schedule, derive_stream, gradient, local_update, loss, momentum_sgd
from lidfl.models import smoothness_bound
from lidfl.trainer import local_update_state


class TestMomentumSgd:
    def test_hand_unrolled_quadratic(self):
        # f(w) = w^2/2, grad = w; tau=2, mu=0.9, lr=0.1 from w0=1:
        # g1=1, v1=1, w1=0.9; g2=0.9, v2=1.8, w2=0.72; u = -0.28
        u, v = momentum_sgd(lambda w, idx: w, np.array([1.0]), [None, None], lr=0.1, momentum=0.9)
        assert u[0] == pytest.approx(-0.28, abs=1e-15)
        assert v[0] == pytest.approx(1.8, abs=1e-15)

    def test_zero_steps_is_identity(self):
        u, v = momentum_sgd(lambda w, idx: w, np.array([2.0]), [], lr=0.1, momentum=0.5)
        assert u[0] == 0.0 and v[0] == 0.0

    def test_initial_momentum_carries_in(self):
        # with g = 0 the update is pure momentum decay
        u, _ = momentum_sgd(lambda w, idx: np.zeros(1), np.array([0.0]), [None], lr=1.0, momentum=0.5, v0=np.array([1.0]))
        assert u[0] == -0.5


class TestLocalUpdate:
    def test_single_full_batch_step_is_scaled_gradient(self, softmax_spec, small_batch):
        cfg = LocalTrainConfig(tau=1, batch_size=len(small_batch), lr=0.3, momentum=0.0)
        w0 = np.random.default_rng(1).standard_normal(softmax_spec.param_dim)
        u = local_update(softmax_spec, w0, small_batch, cfg, derive_stream(0, "c"))
        expected = -0.3 * gradient(softmax_spec, w0, small_batch)
        assert np.allclose(u, expected, rtol=0, atol=1e-12)

    def test_deterministic_per_stream(self, softmax_spec, small_batch):
        cfg = LocalTrainConfig(tau=4, batch_size=8, lr=0.1, momentum=0.9)
        w0 = np.zeros(softmax_spec.param_dim)
        a = local_update(softmax_spec, w0, small_batch, cfg, derive_stream(3, "c"))
        b = local_update(softmax_spec, w0, small_batch, cfg, derive_stream(3, "c"))
        assert np.array_equal(a, b)

    def test_w0_unmodified(self, softmax_spec, small_batch):
        cfg = LocalTrainConfig(tau=2, batch_size=8, lr=0.1, momentum=0.5)
        w0 = np.ones(softmax_spec.param_dim)
        local_update(softmax_spec, w0, small_batch, cfg, derive_stream(0, "c"))
        assert np.array_equal(w0, np.ones(softmax_spec.param_dim))

    def test_descent_with_safe_lr(self, softmax_spec, mixture_batch):
        lr = 1.0 / smoothness_bound(softmax_spec, mixture_batch)
        cfg = LocalTrainConfig(tau=5, batch_size=len(mixture_batch), lr=lr, momentum=0.0)
        w0 = np.random.default_rng(2).standard_normal(softmax_spec.param_dim)
        u = local_update(softmax_spec, w0, mixture_batch, cfg, derive_stream(0, "c"))
        assert loss(softmax_spec, w0 + u, mixture_batch) <= loss(softmax_spec, w0, mixture_batch)

    def test_empty_training_data(self, softmax_spec):
        from lidfl import Batch

        cfg = LocalTrainConfig(tau=1, batch_size=4, lr=0.1, momentum=0.0)
        with pytest.raises(ValueError):
            local_update(softmax_spec, np.zeros(softmax_spec.param_dim), Batch(np.zeros((0, 4)), np.zeros(0, dtype=int)), cfg, derive_stream(0, "c"))

    def test_state_variant_returns_final_momentum(self, softmax_spec, small_batch):
        cfg = LocalTrainConfig(tau=3, batch_size=len(small_batch), lr=0.1, momentum=0.9)
        w0 = np.zeros(softmax_spec.param_dim)
        u1, v1 = local_update_state(softmax_spec, w0, small_batch, cfg, derive_stream(0, "c"))
        # feeding the momentum back must change the next update
        u2a = local_update(softmax_spec, w0 + u1, small_batch, cfg, derive_stream(1, "c"))
        u2b = local_update(softmax_spec, w0 + u1, small_batch, cfg, derive_stream(1, "c"), v0=v1)
        assert not np.allclose(u2a, u2b)


class TestBatchSchedule:
    def test_each_epoch_visits_every_index_once(self):
        rng = derive_stream(0, "b").generator()
        batches = list(batch_schedule(10, 3, 8, rng))
        first_epoch = np.concatenate(batches[:4])
        assert sorted(first_epoch.tolist()) == list(range(10))
        assert [len(b) for b in batches[:4]] == [3, 3, 3, 1]
        second_epoch_start = np.concatenate(batches[4:])
        assert len(set(second_epoch_start.tolist())) == len(second_epoch_start)

    def test_large_batch_is_full_data(self):
        rng = derive_stream(0, "b").generator()
        batches = list(batch_schedule(5, 100, 3, rng))
        for b in batches:
            assert sorted(b.tolist()) == list(range(5))

    def test_reshuffles_between_epochs(self):
        rng = derive_stream(1, "b").generator()
        batches = list(batch_schedule(30, 30, 2, rng))
        assert not np.array_equal(batches[0], batches[1])
