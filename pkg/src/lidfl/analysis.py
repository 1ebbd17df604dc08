"""Empirical checks of the convergence theory, and sweep statistics.

Two theory checks are implemented:

* :func:`simulate_failure_rate` — Monte Carlo of the voting step with an
  (eta, p)-accurate oracle and a worst-case Byzantine bloc, compared against
  the closed-form Hoeffding bound exp(-2*(p^(q+1) - 1/((q+1)*gamma))^2 * k)
  on the probability that a 2*eta-separated best candidate is pruned.
* :func:`check_envelope` — verifies that the per-round excess loss of the
  best listed model stays below the geometric envelope
  rho^t * E0 + 2*eta*beta*q/(alpha*gamma*(1-delta)), where
  rho = 1 - alpha*gamma*(1-delta)/(beta*q) is the per-round contraction
  factor and the additive floor is the geometric series limit of the
  per-round 2*eta slack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import RngStream
from .models import Batch, ModelSpec, as_batch, gradient, loss, smoothness_bound


@dataclass(frozen=True)
class EnvelopeParams:
    """Constants of the contraction envelope.

    ``delta`` is the per-round voting-failure probability and ``eta`` the
    oracle accuracy; with a noiseless oracle both are 0 and the envelope is
    the pure geometric decay of the initial excess.
    """

    alpha: float
    beta: float
    gamma: float
    q: int
    delta: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        if not (0 < self.alpha <= self.beta):
            raise ValueError("need 0 < alpha <= beta")
        if not 0 < self.gamma <= 1 or self.q < 1:
            raise ValueError("invalid gamma or q")
        if not 0 <= self.delta <= 1 or self.eta < 0:
            raise ValueError("invalid delta or eta")

    @property
    def floor(self) -> float:
        """Additive envelope floor: the geometric-series limit of 2*eta."""
        if self.eta == 0.0:
            return 0.0
        denom = self.alpha * self.gamma * (1.0 - self.delta)
        return math.inf if denom == 0.0 else 2.0 * self.eta * self.beta * self.q / denom


def contraction_factor(params: EnvelopeParams) -> float:
    """Per-round factor 1 - alpha*gamma*(1-delta)/(beta*q), in (0, 1]."""
    rho = 1.0 - params.alpha * params.gamma * (1.0 - params.delta) / (params.beta * params.q)
    if rho <= 0.0:
        raise ValueError(f"contraction factor {rho} <= 0: outside the guaranteed regime")
    return rho


@dataclass(frozen=True)
class EnvelopeReport:
    rho: float
    floor: float
    n_rounds: int
    fraction_above: float
    slack: float
    passes: bool | None
    regime_violation: bool

    def __str__(self) -> str:
        if self.regime_violation:
            return "envelope check skipped: q below floor(1/gamma), guarantee regime violated"
        status = "PASS" if self.passes else "FAIL"
        return (
            f"envelope {status}: {self.fraction_above * 100:.2f}% of {self.n_rounds} rounds "
            f"above rho^t envelope (rho={self.rho:.6f}, floor={self.floor:.3g}, "
            f"allowed {self.slack * 100:.0f}%)"
        )


def check_envelope(
    per_seed_records: Sequence[Sequence],
    params: EnvelopeParams,
    f_star,
    initial_loss,
    slack: float = 0.05,
) -> EnvelopeReport:
    """Compare seed-averaged best-model excess loss against the envelope.

    ``per_seed_records`` holds one RoundRecord list per repeat seed;
    ``f_star`` and ``initial_loss`` are scalars or per-seed sequences. The
    check passes when at most ``slack`` of the rounds exceed the envelope.
    """
    if params.q < math.floor(1.0 / params.gamma):
        return EnvelopeReport(
            rho=float("nan"), floor=params.floor, n_rounds=0, fraction_above=float("nan"),
            slack=slack, passes=None, regime_violation=True,
        )
    n_seeds = len(per_seed_records)
    if n_seeds == 0:
        raise ValueError("no records to check")
    f_star = np.broadcast_to(np.asarray(f_star, dtype=float), (n_seeds,))
    initial = np.broadcast_to(np.asarray(initial_loss, dtype=float), (n_seeds,))
    n_rounds = min(len(r) for r in per_seed_records)
    excess = np.stack(
        [
            np.array([rec.best_global_loss for rec in records[:n_rounds]]) - fs
            for records, fs in zip(per_seed_records, f_star)
        ]
    ).mean(axis=0)
    e0 = float((initial - f_star).mean())
    rho = contraction_factor(params)
    t = np.arange(1, n_rounds + 1)
    envelope = rho**t * e0 + params.floor
    frac = float(np.mean(excess > envelope))
    return EnvelopeReport(
        rho=rho, floor=params.floor, n_rounds=n_rounds, fraction_above=frac,
        slack=slack, passes=frac <= slack, regime_violation=False,
    )


@dataclass(frozen=True)
class FailureTrialConfig:
    """Setup of the voting-failure Monte Carlo.

    The q+1 candidates have the best (true loss 0) at the highest list
    index, with every other candidate exactly ``loss_gap`` worse. The m-k
    Byzantine voters all pile onto one suboptimal candidate, the placement
    that is adversarial under the highest-index prune tie-break.
    """

    m: int
    k: int
    q: int
    p: float
    eta: float
    loss_gap: float
    trials: int = 100_000
    fail_noise: float | None = None  # half-range of a failed oracle draw

    def __post_init__(self):
        if not 0 <= self.k <= self.m or self.m < 1 or self.q < 1:
            raise ValueError("invalid m, k, q")
        if not 0 < self.p <= 1 or self.eta < 0 or self.trials < 1:
            raise ValueError("invalid oracle parameters")
        if self.loss_gap <= 0 or self.loss_gap < 2 * self.eta:
            raise ValueError("loss_gap must be positive and at least 2*eta")

    @property
    def gamma(self) -> float:
        return self.k / self.m

    @property
    def noise_bound(self) -> float:
        if self.fail_noise is not None:
            return self.fail_noise
        return 10.0 * (self.loss_gap + self.eta) + 1.0


@dataclass(frozen=True)
class FailureReport:
    empirical_rate: float
    hoeffding_bound: float
    margin: float  # p^(q+1) - 1/((q+1)*gamma)
    trials: int


def hoeffding_failure_bound(m: int, k: int, q: int, p: float) -> tuple[float, float]:
    """(bound, margin) of the closed-form voting-failure probability."""
    if k == 0:
        return 1.0, float("-inf")
    margin = p ** (q + 1) - m / ((q + 1) * k)
    return math.exp(-2.0 * margin * margin * k), margin


def simulate_failure_rate(cfg: FailureTrialConfig, rng: RngStream, chunk: int = 20_000) -> FailureReport:
    """Monte Carlo estimate of the voting-failure rate, with its bound.

    Requires the bound's margin p^(q+1) - 1/((q+1)*gamma) to be positive
    (except in the degenerate k=0 case, where the bound is trivially 1).
    """
    bound, margin = hoeffding_failure_bound(cfg.m, cfg.k, cfg.q, cfg.p)
    if cfg.k > 0 and margin <= 0:
        raise ValueError(
            f"p^(q+1)={cfg.p ** (cfg.q + 1):.4f} must exceed 1/((q+1)*gamma)="
            f"{cfg.m / ((cfg.q + 1) * cfg.k):.4f}; the failure bound does not apply"
        )
    n_cand = cfg.q + 1
    best = cfg.q  # best candidate sits at the newest (highest) index
    true_losses = np.full(n_cand, cfg.loss_gap)
    true_losses[best] = 0.0
    gen = rng.generator()
    failures = 0
    done = 0
    while done < cfg.trials:
        size = min(chunk, cfg.trials - done)
        if cfg.k > 0:
            ok = gen.random((size, cfg.k, n_cand)) < cfg.p
            noise = np.where(
                ok,
                gen.uniform(-cfg.eta, cfg.eta, (size, cfg.k, n_cand)),
                gen.uniform(-cfg.noise_bound, cfg.noise_bound, (size, cfg.k, n_cand)),
            )
            votes = np.argmin(true_losses + noise, axis=2)
            counts = (votes[:, :, None] == np.arange(n_cand)).sum(axis=1)
        else:
            counts = np.zeros((size, n_cand), dtype=np.int64)
        counts[:, 0] += cfg.m - cfg.k  # Byzantine pile-on
        pruned = n_cand - 1 - np.argmin(counts[:, ::-1], axis=1)
        failures += int((pruned == best).sum())
        done += size
    return FailureReport(failures / cfg.trials, bound, margin, cfg.trials)


def estimate_f_star(
    spec: ModelSpec,
    batches,
    lr: float | None = None,
    max_steps: int = 50_000,
    grad_tol: float = 1e-8,
) -> tuple[float, np.ndarray]:
    """Minimize the honest global loss with long-run full-batch descent.

    ``batches`` is one batch or the per-client list; the objective is the
    mean over clients of their mean loss. Returns (f_star, w_star).
    """
    if isinstance(batches, Batch) or (isinstance(batches, tuple) and len(batches) == 2):
        batches = [batches]
    batches = [as_batch(b) for b in batches]
    pooled = Batch(np.concatenate([b.x for b in batches]), np.concatenate([b.y for b in batches]))
    if lr is None:
        lr = 1.0 / smoothness_bound(spec, pooled)
    sizes = {len(b) for b in batches}
    w = np.zeros(spec.param_dim)
    if len(sizes) == 1:
        # equal client sizes: mean-of-means coincides with the pooled mean
        for _ in range(max_steps):
            g = gradient(spec, w, pooled)
            if np.linalg.norm(g) <= grad_tol:
                break
            w = w - lr * g
    else:
        for _ in range(max_steps):
            g = np.mean([gradient(spec, w, b) for b in batches], axis=0)
            if np.linalg.norm(g) <= grad_tol:
                break
            w = w - lr * g
    f_star = float(np.mean([loss(spec, w, b) for b in batches]))
    return f_star, w


def summarize_sweep(results: Iterable[Mapping]) -> dict:
    """Aggregate per-run results into mean +/- std cells and worst columns.

    Each result needs keys ``method``, ``attack``, ``q``, ``gamma`` and
    ``final_acc``. Cells report the sample standard deviation (0.0 for a
    single run); the worst column is the minimum mean accuracy across
    attacks for each (method, q, gamma) row.
    """
    groups: dict[tuple, list[float]] = {}
    for r in results:
        key = (str(r["method"]), str(r["attack"]), int(r["q"]), float(r["gamma"]))
        groups.setdefault(key, []).append(float(r["final_acc"]))
    cells = []
    for (method, attack, q, gamma), accs in sorted(groups.items()):
        arr = np.asarray(accs)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        cells.append(
            {
                "method": method, "attack": attack, "q": q, "gamma": gamma,
                "n": int(arr.size), "mean_acc": float(arr.mean()), "std_acc": std,
            }
        )
    worst: dict[tuple, dict] = {}
    for cell in cells:
        key = (cell["method"], cell["q"], cell["gamma"])
        cur = worst.get(key)
        if cur is None or cell["mean_acc"] < cur["worst_mean_acc"]:
            worst[key] = {
                "method": cell["method"], "q": cell["q"], "gamma": cell["gamma"],
                "worst_mean_acc": cell["mean_acc"], "worst_attack": cell["attack"],
            }
    return {"cells": cells, "worst": [worst[k] for k in sorted(worst)]}
