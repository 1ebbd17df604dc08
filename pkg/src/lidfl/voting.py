"""Validation oracles, vote strategies, and the tally-and-prune step.

Honest clients estimate every candidate's loss through a validation oracle
and vote for the minimum. Two oracle modes exist:

* ``local-split`` — the estimate is the exact mean loss on the client's own
  validation split (the experimental default).
* ``synthetic-noisy`` — the estimate is the true loss plus uniform noise in
  [-eta, eta] with probability p, and plus uniform noise in [-H, H]
  otherwise. This models an (eta, p)-accurate oracle with explicit failure,
  independent of any dataset, and is what the voting-failure Monte Carlo
  uses.

The prune step removes one candidate with the minimum vote count; count
ties are broken toward the highest list index, i.e. against the newest
candidate, which is the adversarially safe choice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream
from .models import ModelSpec, as_batch, loss

ORACLE_MODES = ("local-split", "synthetic-noisy")
VOTE_ATTACKS = ("worst", "random")


@dataclass(frozen=True)
class ValidationOracle:
    mode: str = "local-split"
    eta: float = 0.0
    p: float = 1.0
    loss_bound: float = 10.0  # H, the loss range used when the oracle fails

    def __post_init__(self):
        if self.mode not in ORACLE_MODES:
            raise ValueError(f"unknown oracle mode {self.mode!r}")
        if self.eta < 0 or not 0 < self.p <= 1 or self.loss_bound <= 0:
            raise ValueError("invalid oracle parameters")


def noisy_estimate(true_loss: float, eta: float, p: float, loss_bound: float, rng: np.random.Generator) -> float:
    """One (eta, p)-accurate oracle draw around ``true_loss``."""
    if rng.random() < p:
        return true_loss + rng.uniform(-eta, eta)
    return true_loss + rng.uniform(-loss_bound, loss_bound)


def estimate_loss(
    oracle: ValidationOracle,
    spec: ModelSpec,
    w: np.ndarray,
    validation,
    rng: RngStream | None = None,
) -> float:
    """Estimate the loss of ``w`` as one oracle query."""
    batch = as_batch(validation)
    if len(batch) == 0:
        raise ValueError("validation data is empty")
    true_loss = loss(spec, w, batch)
    if oracle.mode == "local-split":
        return true_loss
    if rng is None:
        raise ValueError("synthetic-noisy oracle needs an rng stream")
    return noisy_estimate(true_loss, oracle.eta, oracle.p, oracle.loss_bound, rng.generator())


def honest_vote(
    oracle: ValidationOracle,
    spec: ModelSpec,
    candidates,
    validation,
    rng: RngStream | None = None,
) -> int:
    """Index of the candidate with the lowest estimated loss (ties: lowest)."""
    if len(candidates) == 0:
        raise ValueError("no candidates to vote on")
    gen = rng.generator() if rng is not None and oracle.mode == "synthetic-noisy" else None
    batch = as_batch(validation)
    estimates = []
    for w in candidates:
        true_loss = loss(spec, w, batch)
        if gen is None:
            estimates.append(true_loss)
        else:
            estimates.append(noisy_estimate(true_loss, oracle.eta, oracle.p, oracle.loss_bound, gen))
    return int(np.argmin(estimates))


def byzantine_vote(strategy: str, estimated_losses, q: int, rng: RngStream | np.random.Generator) -> int:
    """A Byzantine vote over q+1 candidates.

    ``worst`` targets the highest-loss candidate; ``random`` picks uniformly
    among all candidates except the lowest-loss one.
    """
    losses = np.asarray(estimated_losses, dtype=np.float64)
    if losses.shape != (q + 1,):
        raise ValueError(f"expected {q + 1} estimated losses, got {losses.shape}")
    if strategy == "worst":
        return int(np.argmax(losses))
    if strategy == "random":
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        best = int(np.argmin(losses))
        others = [i for i in range(q + 1) if i != best]
        return int(others[gen.integers(len(others))])
    raise ValueError(f"unknown voting attack {strategy!r}")


def tally_votes(votes, n_candidates: int) -> np.ndarray:
    votes = np.asarray(votes, dtype=np.int64)
    if votes.size and (votes.min() < 0 or votes.max() >= n_candidates):
        raise ValueError("vote index out of range")
    return np.bincount(votes, minlength=n_candidates)


def tally_and_prune(candidates, votes, rng: RngStream | None = None):
    """Remove one minimum-vote candidate; ties prune the highest index.

    Returns (surviving candidates in order, removed index). ``rng`` is
    accepted for interface stability but unused: the tie-break is
    deterministic.
    """
    n = len(candidates)
    counts = tally_votes(votes, n)
    # argmin over the reversed counts finds the highest-index minimum
    removed = n - 1 - int(np.argmin(counts[::-1]))
    survivors = [c for i, c in enumerate(candidates) if i != removed]
    return survivors, removed
