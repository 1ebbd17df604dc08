"""Synthetic datasets, client partitioning, and label-flip poisoning.

The built-in generator draws a Gaussian mixture: class means are scaled so
their minimum pairwise distance equals the configured separation, which
makes task difficulty directly controllable. A CSV loader (header row
``label,f0,f1,...``) lets small real datasets be dropped in instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RngStream
from .models import Batch


@dataclass(frozen=True)
class DatasetConfig:
    generator: str = "gaussian-mixture"  # or "file"
    n: int = 2100
    input_dim: int = 16
    n_classes: int = 10
    separation: float = 6.0
    noise_sigma: float = 1.0
    path: str | None = None

    def __post_init__(self):
        if self.generator not in ("gaussian-mixture", "file"):
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.generator == "gaussian-mixture":
            if self.n < 1:
                raise ValueError("dataset size must be positive")
            if self.n_classes < 2 or self.separation <= 0 or self.noise_sigma <= 0:
                raise ValueError("invalid gaussian-mixture config")
        elif not self.path:
            raise ValueError("file generator requires a path")


def generate(config: DatasetConfig, rng: RngStream) -> Batch:
    """Draw the full dataset deterministically from the given stream."""
    if config.generator == "file":
        return load_csv(config.path)
    gen = rng.generator()
    means = gen.standard_normal((config.n_classes, config.input_dim))
    diffs = means[:, None, :] - means[None, :, :]
    dists = np.linalg.norm(diffs, axis=2)
    min_dist = dists[np.triu_indices(config.n_classes, k=1)].min()
    means *= config.separation / min_dist
    labels = gen.integers(config.n_classes, size=config.n)
    x = means[labels] + config.noise_sigma * gen.standard_normal((config.n, config.input_dim))
    return Batch(x, labels)


def load_csv(path: str | Path) -> Batch:
    """Load a dataset from CSV with header ``label,f0,f1,...``."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    if not header or header[0] != "label" or any(h != f"f{i}" for i, h in enumerate(header[1:])):
        raise ValueError(f"{path}: expected header 'label,f0,f1,...', got {header!r}")
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = raw[:, 0]
    if not np.all(labels == np.round(labels)) or labels.min() < 0:
        raise ValueError(f"{path}: labels must be non-negative integers")
    return Batch(raw[:, 1:], labels.astype(np.int64))


@dataclass(frozen=True)
class Partition:
    """Per-client, per-role index sets into one dataset.

    Roles are disjoint within every client; across clients the index sets
    never overlap either (every example belongs to exactly one client).
    """

    train: tuple[np.ndarray, ...]
    val: tuple[np.ndarray, ...]
    test: tuple[np.ndarray, ...]
    mode: str

    @property
    def n_clients(self) -> int:
        return len(self.train)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Split ``total`` into integer parts proportional to ``weights``."""
    quotas = total * weights / weights.sum()
    parts = np.floor(quotas).astype(int)
    short = total - parts.sum()
    if short > 0:
        order = np.argsort(-(quotas - parts), kind="stable")
        parts[order[:short]] += 1
    return parts


def _role_sizes(block: int, ratios: tuple[float, float, float]) -> np.ndarray:
    sizes = _largest_remainder(block, np.asarray(ratios, dtype=float))
    # repair empty roles by borrowing from the largest one
    while (sizes == 0).any():
        sizes[np.argmax(sizes)] -= 1
        sizes[np.argmin(sizes)] += 1
    return sizes


def partition(
    n: int,
    m: int,
    ratios: tuple[float, float, float],
    mode: str,
    rng: RngStream,
) -> Partition:
    """Split ``n`` example indices across ``m`` clients into train/val/test.

    Balanced mode gives every client the same share (+/- 1, per role);
    imbalanced mode draws client shares uniformly from [0.5, 1.5] of the
    average before renormalizing, with a floor of one example per role.
    """
    if m < 1:
        raise ValueError("need at least one client")
    if any(r <= 0 for r in ratios) or len(ratios) != 3:
        raise ValueError("ratios must be three positive numbers")
    if mode not in ("balanced", "imbalanced"):
        raise ValueError(f"unknown balance mode {mode!r}")
    if n < 3 * m:
        raise ValueError(f"n={n} too small for {m} clients with three roles each")
    gen = rng.generator()
    order = gen.permutation(n)
    if mode == "balanced":
        blocks = _largest_remainder(n, np.ones(m))
    else:
        draw = gen.uniform(0.5, 1.5, size=m)
        blocks = np.maximum(_largest_remainder(n, draw), 3)
        while blocks.sum() > n:
            blocks[np.argmax(blocks)] -= 1
    train, val, test = [], [], []
    pos = 0
    for b in blocks:
        tr, va, te = _role_sizes(int(b), ratios)
        train.append(np.sort(order[pos : pos + tr]))
        val.append(np.sort(order[pos + tr : pos + tr + va]))
        test.append(np.sort(order[pos + tr + va : pos + tr + va + te]))
        pos += int(b)
    return Partition(tuple(train), tuple(val), tuple(test), mode)


def flip_labels(data: Batch, n_classes: int) -> Batch:
    """Replace every label y with n_classes - y - 1 (an involution)."""
    if data.y.max(initial=0) >= n_classes:
        raise ValueError("label out of range for flip")
    return Batch(data.x, n_classes - 1 - data.y)
