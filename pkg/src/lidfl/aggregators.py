"""Robust aggregation rules.

Four single-output baselines (naive mean, coordinate-wise median, Weiszfeld
geometric median, norm-bounded mean) and two candidate-list rules used by
the list-decodable variant:

* rknn — repeatedly pick a random remaining point and average its k nearest
  remaining points (self included) into a candidate, removing them.
* meb — repeatedly find the point whose k-th nearest remaining neighbour is
  closest (an approximate minimum enclosing ball), average that ball into a
  candidate, and remove it.

Both return one uniformly chosen candidate together with the full list.
Nearest-neighbour and radius ties break toward the lowest point index, and
a final group smaller than k takes all remaining points, so the candidates
always partition the input into ceil(m/k) groups.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream

AGGREGATOR_KINDS = ("fedavg", "cwm", "gm", "norm", "rknn", "meb")

# the norm clip threshold used throughout the experiments
DEFAULT_NORM_TAU = 0.215771


@dataclass(frozen=True)
class AggregatorKind:
    kind: str = "fedavg"
    gm_iters: int = 1
    norm_tau: float = DEFAULT_NORM_TAU
    k: int | None = None  # honest count, required by rknn/meb

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ValueError(f"unknown aggregator {self.kind!r}")
        if self.gm_iters < 1 or self.norm_tau <= 0:
            raise ValueError("invalid aggregator parameters")
        if self.kind in ("rknn", "meb") and (self.k is None or self.k < 1):
            raise ValueError(f"{self.kind} requires k >= 1")


def _stack(updates) -> np.ndarray:
    arr = np.asarray(updates, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need a non-empty list of equal-length vectors")
    return arr


def agg_mean(updates) -> np.ndarray:
    return _stack(updates).mean(axis=0)


def agg_cwm(updates) -> np.ndarray:
    """Coordinate-wise median; even counts average the two middle values."""
    return np.median(_stack(updates), axis=0)


def agg_gm(updates, iters: int = 1) -> np.ndarray:
    """Weiszfeld iterations toward the geometric median, from the mean.

    If the iterate lands on a data point (within 1e-12) the step is a fixed
    point and iteration stops there.
    """
    pts = _stack(updates)
    x = pts.mean(axis=0)
    for _ in range(iters):
        dists = np.linalg.norm(pts - x, axis=1)
        if np.any(dists < 1e-12):
            return x
        inv = 1.0 / dists
        x = (pts * inv[:, None]).sum(axis=0) / inv.sum()
    return x


def agg_norm(updates, tau: float = DEFAULT_NORM_TAU) -> np.ndarray:
    """Mean of the updates after clipping each norm to at most tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    pts = _stack(updates)
    norms = np.linalg.norm(pts, axis=1)
    scale = np.ones_like(norms)
    over = norms > tau
    scale[over] = tau / norms[over]
    return (pts * scale[:, None]).mean(axis=0)


def _nearest_group(pts: np.ndarray, alive: np.ndarray, center: int, k: int) -> np.ndarray:
    """Indices (into pts) of the k nearest alive points to ``center``.

    The center itself is included at distance zero; distance ties keep the
    lowest point index. Fewer than k alive points means all of them.
    """
    dists = np.linalg.norm(pts[alive] - pts[center], axis=1)
    order = np.argsort(dists, kind="stable")
    return alive[order[: min(k, alive.size)]]


def agg_rknn(updates, k: int, rng: RngStream) -> tuple[np.ndarray, list[np.ndarray]]:
    """Random-start k-nearest-neighbour grouping; returns (choice, candidates)."""
    pts = _stack(updates)
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"need 1 <= k <= {pts.shape[0]}")
    gen = rng.generator()
    alive = np.arange(pts.shape[0])
    candidates: list[np.ndarray] = []
    while alive.size:
        start = alive[gen.integers(alive.size)]
        group = _nearest_group(pts, alive, int(start), k)
        candidates.append(pts[group].mean(axis=0))
        alive = np.setdiff1d(alive, group, assume_unique=True)
    choice = candidates[gen.integers(len(candidates))]
    return choice, candidates


def agg_meb(updates, k: int, rng: RngStream) -> tuple[np.ndarray, list[np.ndarray]]:
    """Minimum-enclosing-ball grouping; returns (choice, candidates)."""
    pts = _stack(updates)
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"need 1 <= k <= {pts.shape[0]}")
    gen = rng.generator()
    alive = np.arange(pts.shape[0])
    candidates: list[np.ndarray] = []
    while alive.size:
        radii = np.empty(alive.size)
        for pos, center in enumerate(alive):
            group = _nearest_group(pts, alive, int(center), k)
            radii[pos] = np.linalg.norm(pts[group] - pts[center], axis=1).max()
        best = alive[int(np.argmin(radii))]  # ties: lowest point index
        group = _nearest_group(pts, alive, int(best), k)
        candidates.append(pts[group].mean(axis=0))
        alive = np.setdiff1d(alive, group, assume_unique=True)
    choice = candidates[gen.integers(len(candidates))]
    return choice, candidates
