"""Byzantine update-crafting strategies and the omniscient view behind them.

The update attacks are: sign flip (sf), random Gaussian replacement
(gauss), the empire/inner-product attack (epr), the little-is-enough
perturbation (lie), and the omniscient mean-steering attack (omn). Label
flipping (lf) is a data poison and lives in :mod:`lidfl.data`; here it only
names a catalog entry.

Attacks that mimic honest statistics get an :class:`OmniscientView`: the
attacker re-simulates every honest client's local update from the broadcast
model on the honest data. That simulation runs on attacker-side streams so
the honest clients' own randomness is never consumed.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import RngStream
from .models import Batch, ModelSpec
from .trainer import LocalTrainConfig, local_update

ATTACK_KINDS = ("none", "epr", "gauss", "lf", "lie", "omn", "sf")

# attacks that need the honest-update statistics before crafting
VIEW_ATTACKS = frozenset({"epr", "lie", "omn"})


@dataclass(frozen=True)
class AttackKind:
    """Which attack a Byzantine client runs, plus its knobs.

    ``z`` scales the lie perturbation; ``omn_scale`` is the factor c in the
    omn target -c * (honest mean).
    """

    kind: str = "none"
    z: float = 1.5
    omn_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not (np.isfinite(self.z) and np.isfinite(self.omn_scale)):
            raise ValueError("attack parameters must be finite")


@dataclass(frozen=True)
class OmniscientView:
    """Honest updates simulated from one broadcast model, with their stats.

    ``std`` is the per-coordinate population standard deviation.
    """

    updates: tuple[np.ndarray, ...]
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_updates(cls, updates: Sequence[np.ndarray]) -> "OmniscientView":
        if not updates:
            raise ValueError("need at least one honest update")
        stack = np.stack(updates)
        return cls(tuple(np.array(u) for u in updates), stack.mean(axis=0), stack.std(axis=0))


def build_omniscient_view(
    w: np.ndarray,
    honest_train_sets: Sequence[Batch],
    spec: ModelSpec,
    cfg: LocalTrainConfig,
    rng: RngStream,
) -> OmniscientView:
    """Simulate every honest client's local update from ``w``.

    The per-client simulations draw from children of ``rng`` only, leaving
    the real clients' streams untouched.
    """
    if not honest_train_sets:
        raise ValueError("omniscient view requires at least one honest client")
    updates = [
        local_update(spec, w, train, cfg, rng.child(f"sim{i}"))
        for i, train in enumerate(honest_train_sets)
    ]
    return OmniscientView.from_updates(updates)


def craft_epr(view: OmniscientView, k: int, m: int) -> np.ndarray:
    """Scale the honest mean by -1.1*k/(m-k), flipping the inner product."""
    if not 1 <= k < m:
        raise ValueError(f"need m > k >= 1, got k={k}, m={m}")
    return (-1.1 * k / (m - k)) * view.mean


def craft_gauss(view: OmniscientView, true_update: np.ndarray, rng: RngStream) -> np.ndarray:
    """Replace the update with isotropic Gaussian noise of matching spread.

    The scale is the sample standard deviation of the true update's
    coordinates; for a 1-D update that is undefined, so |u| is used instead
    (with a warning).
    """
    u = np.asarray(true_update, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ValueError("true update must be finite")
    if u.size == 1:
        warnings.warn("gauss attack on a 1-D update: using |u| as the scale")
        sigma = float(np.abs(u[0]))
    else:
        sigma = float(u.std(ddof=1))
    return sigma * rng.generator().standard_normal(u.shape)


def craft_lie(view: OmniscientView, z: float) -> np.ndarray:
    """Hide inside the honest spread: mean - z * (per-coordinate std)."""
    return view.mean - z * view.std


def craft_omn(view: OmniscientView, k: int, m: int, target: np.ndarray) -> np.ndarray:
    """Steer the naive mean of all m updates exactly onto ``target``.

    The m-k Byzantine clients all send (target*m - sum of honest updates)
    / (m-k), so averaging the full update set yields ``target``.
    """
    if not 1 <= k < m:
        raise ValueError(f"need m > k >= 1, got k={k}, m={m}")
    target = np.asarray(target, dtype=np.float64)
    if not np.all(np.isfinite(target)):
        raise ValueError("target must be finite")
    honest_sum = view.mean * len(view.updates)
    return (target * m - honest_sum) / (m - k)


def craft_sf(true_update: np.ndarray) -> np.ndarray:
    """Flip the sign of the client's true update."""
    u = np.asarray(true_update, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ValueError("true update must be finite")
    return -u
