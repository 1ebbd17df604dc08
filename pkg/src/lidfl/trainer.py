"""The honest client's local training procedure.

One local update is ``tau`` momentum-SGD steps from the broadcast model;
what travels back to the server is the parameter difference. Batches come
from without-replacement epochs: each epoch visits every training index
exactly once (final batch may be short) before reshuffling.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from .core import RngStream
from .models import Batch, ModelSpec, as_batch, gradient


@dataclass(frozen=True)
class LocalTrainConfig:
    tau: int = 25
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9

    def __post_init__(self):
        if self.tau < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid local training config")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def batch_schedule(n: int, batch_size: int, steps: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Yield ``steps`` index batches from without-replacement epochs."""
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos >= n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos : pos + batch_size]
        pos += batch_size


def momentum_sgd(
    grad_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    w0: np.ndarray,
    batches: Iterable[np.ndarray],
    lr: float,
    momentum: float,
    v0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the update recursion v <- mu*v + g; w <- w - lr*v.

    Returns (w_final - w0, v_final). ``grad_fn(w, idx)`` evaluates the
    stochastic gradient on the index batch ``idx``.
    """
    w = np.array(w0, dtype=np.float64)
    v = np.zeros_like(w) if v0 is None else np.array(v0, dtype=np.float64)
    for idx in batches:
        g = grad_fn(w, idx)
        v = momentum * v + g
        w = w - lr * v
    return w - w0, v


def local_update_state(
    spec: ModelSpec,
    w0: np.ndarray,
    train,
    cfg: LocalTrainConfig,
    rng: RngStream,
    v0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Local update plus the final momentum (for persistence experiments)."""
    batch = as_batch(train)
    if len(batch) == 0:
        raise ValueError("empty training data")
    schedule = batch_schedule(len(batch), cfg.batch_size, cfg.tau, rng.generator())
    return momentum_sgd(
        lambda w, idx: gradient(spec, w, batch.subset(idx)),
        w0,
        schedule,
        cfg.lr,
        cfg.momentum,
        v0,
    )


def local_update(
    spec: ModelSpec,
    w0: np.ndarray,
    train,
    cfg: LocalTrainConfig,
    rng: RngStream,
    v0: np.ndarray | None = None,
) -> np.ndarray:
    """The model update an honest client sends back: w_tau - w0."""
    return local_update_state(spec, w0, train, cfg, rng, v0)[0]
