import itertools
import math

import numpy as np
import pytest

from lidfl import (
    Batch,
    ModelSpec,
    ValidationOracle,
    byzantine_vote,
    derive_stream,
    estimate_loss,
    honest_vote,
    loss,
    tally_and_prune,
    tally_votes,
)


class TestEstimateLoss:
    def test_noiseless_synthetic_is_exact(self, softmax_spec, small_batch):
        oracle = ValidationOracle("synthetic-noisy", eta=0.0, p=1.0)
        w = np.zeros(softmax_spec.param_dim)
        est = estimate_loss(oracle, softmax_spec, w, small_batch, derive_stream(0, "o"))
        assert est == loss(softmax_spec, w, small_batch)

    def test_accurate_draws_stay_within_eta(self, softmax_spec, small_batch):
        oracle = ValidationOracle("synthetic-noisy", eta=0.05, p=1.0)
        w = np.zeros(softmax_spec.param_dim)
        truth = loss(softmax_spec, w, small_batch)
        for seed in range(200):
            est = estimate_loss(oracle, softmax_spec, w, small_batch, derive_stream(seed, "o"))
            assert abs(est - truth) <= 0.05

    def test_local_split_is_the_empirical_mean(self, softmax_spec, small_batch):
        oracle = ValidationOracle("local-split")
        w = np.ones(softmax_spec.param_dim) * 0.2
        assert estimate_loss(oracle, softmax_spec, w, small_batch) == pytest.approx(
            loss(softmax_spec, w, small_batch), abs=1e-12
        )

    def test_empty_validation_rejected(self, softmax_spec):
        oracle = ValidationOracle("local-split")
        with pytest.raises(ValueError):
            estimate_loss(oracle, softmax_spec, np.zeros(softmax_spec.param_dim), Batch(np.zeros((0, 4)), np.zeros(0, dtype=int)))

    def test_failed_draws_use_loss_bound(self):
        # with p ~ 0 every draw is a failure draw from [-H, H]
        oracle = ValidationOracle("synthetic-noisy", eta=0.0, p=1e-12, loss_bound=5.0)
        from lidfl.voting import noisy_estimate

        gen = derive_stream(0, "o").generator()
        draws = [noisy_estimate(0.0, oracle.eta, oracle.p, oracle.loss_bound, gen) for _ in range(500)]
        assert max(map(abs, draws)) <= 5.0
        assert max(map(abs, draws)) > 0.1  # actually spreads out


class TestHonestVote:
    def test_argmin(self, softmax_spec, mixture_batch):
        # candidates with clearly ordered losses: zero vs fitted vs anti-fitted
        from lidfl import gradient_descent

        w_fit = gradient_descent(softmax_spec, mixture_batch, steps=300, lr=0.2)
        candidates = [np.zeros(softmax_spec.param_dim), w_fit, -w_fit]
        oracle = ValidationOracle("local-split")
        assert honest_vote(oracle, softmax_spec, candidates, mixture_batch) == 1

    def test_tie_breaks_to_lowest_index(self, softmax_spec, small_batch):
        w = np.zeros(softmax_spec.param_dim)
        oracle = ValidationOracle("local-split")
        assert honest_vote(oracle, softmax_spec, [w, w.copy(), w.copy()], small_batch) == 0

    def test_single_candidate(self, softmax_spec, small_batch):
        oracle = ValidationOracle("local-split")
        assert honest_vote(oracle, softmax_spec, [np.zeros(softmax_spec.param_dim)], small_batch) == 0


class TestByzantineVote:
    def test_worst_targets_argmax(self):
        assert byzantine_vote("worst", [0.5, 0.3, 0.9], 2, derive_stream(0, "v")) == 2

    def test_random_never_picks_the_best(self):
        picks = set()
        for seed in range(100):
            picks.add(byzantine_vote("random", [0.5, 0.3, 0.9], 2, derive_stream(seed, "v")))
        assert picks == {0, 2}

    def test_worst_tie_breaks_low(self):
        assert byzantine_vote("worst", [0.7, 0.7, 0.7], 2, derive_stream(0, "v")) == 0

    def test_wrong_candidate_count_rejected(self):
        with pytest.raises(ValueError):
            byzantine_vote("worst", [0.5, 0.3], 2, derive_stream(0, "v"))


class TestTallyAndPrune:
    def _prune_counts(self, counts):
        votes = [i for i, c in enumerate(counts) for _ in range(c)]
        candidates = [np.array([float(i)]) for i in range(len(counts))]
        survivors, removed = tally_and_prune(candidates, votes)
        return survivors, removed

    def test_unique_minimum(self):
        survivors, removed = self._prune_counts([10, 9, 8, 5, 3])
        assert removed == 4
        assert [s[0] for s in survivors] == [0.0, 1.0, 2.0, 3.0]

    def test_tie_removes_highest_index(self):
        _, removed = self._prune_counts([3, 3, 29])
        assert removed == 1

    def test_survivor_order_preserved(self):
        survivors, removed = self._prune_counts([1, 5, 0, 5])
        assert removed == 2
        assert [s[0] for s in survivors] == [0.0, 1.0, 3.0]

    def test_tally_counts_sum_to_m(self):
        votes = [0, 1, 1, 2, 2, 2]
        assert tally_votes(votes, 4).sum() == 6

    def test_out_of_range_vote_rejected(self):
        with pytest.raises(ValueError):
            tally_votes([0, 5], 3)

    def test_argmin_invariant_under_constant_shift(self, softmax_spec, small_batch):
        oracle = ValidationOracle("local-split")
        gen = np.random.default_rng(1)
        cands = [gen.standard_normal(softmax_spec.param_dim) for _ in range(4)]
        base = [loss(softmax_spec, w, small_batch) for w in cands]
        assert int(np.argmin(base)) == int(np.argmin([b + 17.3 for b in base]))
        assert honest_vote(oracle, softmax_spec, cands, small_batch) == int(np.argmin(base))


def _compositions(total, parts):
    """All ways to distribute `total` indistinct votes over `parts` slots."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


class TestSurvivalGuarantee:
    def test_exhaustive_small_instances(self):
        """With q >= floor(1/gamma) and unanimous honest voting, no Byzantine
        vote allocation can prune the honest choice."""
        checked = 0
        for m in range(1, 13):
            for k in range(1, m + 1):
                q_min = math.floor(m / k)
                for q in range(q_min, 4):
                    n_cand = q + 1
                    for honest_pos in range(n_cand):
                        for alloc in _compositions(m - k, n_cand):
                            counts = list(alloc)
                            counts[honest_pos] += k
                            votes = [i for i, c in enumerate(counts) for _ in range(c)]
                            candidates = [np.array([float(i)]) for i in range(n_cand)]
                            _, removed = tally_and_prune(candidates, votes)
                            assert removed != honest_pos, (m, k, q, honest_pos, alloc)
                            checked += 1
        assert checked > 5_000  # enumeration actually covered the grid

    def test_random_larger_instances(self):
        gen = np.random.default_rng(0)
        for _ in range(500):
            m = int(gen.integers(13, 60))
            k = int(gen.integers(1, m + 1))
            q = math.floor(m / k) + int(gen.integers(0, 2))
            n_cand = q + 1
            honest_pos = int(gen.integers(n_cand))
            byz_votes = gen.integers(n_cand, size=m - k).tolist()
            votes = byz_votes + [honest_pos] * k
            candidates = [np.array([float(i)]) for i in range(n_cand)]
            _, removed = tally_and_prune(candidates, votes)
            assert removed != honest_pos
