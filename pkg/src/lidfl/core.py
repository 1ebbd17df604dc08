"""Foundational numeric types and seeded randomness.

Model parameters, updates, momenta and gradients are all plain 1-D float64
numpy arrays ("parameter vectors"). Randomness is organized into labelled
streams: every consumer (data generation, client sampling, attack noise, ...)
derives its own stream from the master seed, so runs replay bit-identically
and independent consumers never share generator state.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when parameter vectors of different lengths are combined."""


def as_param_vector(values, dim: int | None = None) -> np.ndarray:
    """Validate and return a finite 1-D float64 parameter vector."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise DimensionError(f"parameter vector must be 1-D, got shape {vec.shape}")
    if dim is not None and vec.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("parameter vector contains NaN or Inf")
    return vec


def vec_axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a*x + y`` without modifying the inputs.

    Raises:
        DimensionError: if x and y differ in length.
        ValueError: if the result is not finite.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape} vs {y.shape}")
    if not np.isfinite(a):
        raise ValueError("scale factor must be finite")
    out = a * x + y
    if not np.all(np.isfinite(out)):
        raise ValueError("vec_axpy produced a non-finite result")
    return out


def l2_norm(x: np.ndarray) -> float:
    """Euclidean norm of a parameter vector."""
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64)))


def _philox_key(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}\x1f{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


@dataclass(frozen=True)
class RngStream:
    """A named, replayable random stream keyed by (seed, label).

    The stream object is immutable; :meth:`generator` returns a fresh
    counter-based generator positioned at the start of the stream, so the
    same (seed, label) always replays the same draw sequence. Distinct
    labels give statistically independent streams.
    """

    seed: int
    label: str

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=_philox_key(self.seed, self.label)))

    def child(self, label: str) -> "RngStream":
        """Derive a sub-stream; children with different labels are independent."""
        return RngStream(self.seed, f"{self.label}/{label}")


def derive_stream(master_seed: int, label: str) -> RngStream:
    """Create the named stream for one consumer of the master seed."""
    return RngStream(int(master_seed), label)
