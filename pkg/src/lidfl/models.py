"""Trainable models: losses, gradients, and predictions.

Two model families cover the convex and non-convex regimes at desk scale:

* ``softmax-regression`` — multinomial logistic regression with an L2
  penalty on every parameter coordinate. With ``l2 > 0`` the loss is
  exactly ``l2``-strongly convex, which is what the convergence checks
  in :mod:`lidfl.analysis` assume.
* ``mlp`` — a single tanh hidden layer, used to exercise the non-convex
  path. No convexity constant exists for it.

A model's parameters live in one flat float64 vector; batches are plain
(features, labels) array pairs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import DimensionError

MODEL_KINDS = ("softmax-regression", "mlp")


@dataclass(frozen=True)
class LabeledExample:
    """One input-output pair: a feature vector and a class index."""

    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Batch:
    """A set of examples as arrays: x is (n, p) float64, y is (n,) int64."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"inconsistent batch shapes {self.x.shape} / {self.y.shape}")

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.x[idx], self.y[idx])

    @classmethod
    def from_examples(cls, examples: Iterable[LabeledExample]) -> "Batch":
        examples = list(examples)
        if not examples:
            raise ValueError("empty example list")
        return cls(np.stack([e.features for e in examples]), np.array([e.label for e in examples]))


def as_batch(data) -> Batch:
    """Coerce a Batch, an (x, y) pair, or a sequence of examples to a Batch."""
    if isinstance(data, Batch):
        return data
    if isinstance(data, tuple) and len(data) == 2:
        return Batch(*data)
    return Batch.from_examples(data)


def concat_batches(batches: Sequence[Batch]) -> Batch:
    return Batch(np.concatenate([b.x for b in batches]), np.concatenate([b.y for b in batches]))


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and regularization of a trainable model.

    `l2` is the coefficient of the (l2/2)*||w||^2 penalty applied to the
    whole parameter vector, bias included; for softmax regression it is
    also the strong-convexity constant of the loss.
    """

    kind: str
    input_dim: int
    n_classes: int
    hidden: int = 0
    l2: float = 0.01

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp requires hidden >= 1")
        if self.n_classes < 2 or self.input_dim < 1 or self.l2 < 0:
            raise ValueError("invalid model spec")

    @property
    def param_dim(self) -> int:
        p, m, h = self.input_dim, self.n_classes, self.hidden
        if self.kind == "softmax-regression":
            return m * p + m
        return h * p + h + m * h + m

    def init_params(self, rng: np.random.Generator | None = None, scale: float = 0.0) -> np.ndarray:
        if scale == 0.0 or rng is None:
            return np.zeros(self.param_dim)
        return scale * rng.standard_normal(self.param_dim)


def _unpack(spec: ModelSpec, w: np.ndarray):
    if w.shape != (spec.param_dim,):
        raise DimensionError(f"expected parameter dim {spec.param_dim}, got {w.shape}")
    p, m, h = spec.input_dim, spec.n_classes, spec.hidden
    if spec.kind == "softmax-regression":
        return w[: m * p].reshape(m, p), w[m * p :]
    o1 = h * p
    o2 = o1 + h
    o3 = o2 + m * h
    return w[:o1].reshape(h, p), w[o1:o2], w[o2:o3].reshape(m, h), w[o3:]


def _forward(spec: ModelSpec, w: np.ndarray, x: np.ndarray):
    """Return (logits, hidden activations or None)."""
    if spec.kind == "softmax-regression":
        wt, b = _unpack(spec, w)
        return x @ wt.T + b, None
    w1, b1, w2, b2 = _unpack(spec, w)
    hid = np.tanh(x @ w1.T + b1)
    return hid @ w2.T + b2, hid


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(spec: ModelSpec, w: np.ndarray, data) -> float:
    """Mean cross-entropy over the batch plus (l2/2)*||w||^2."""
    batch = as_batch(data)
    if len(batch) == 0:
        raise ValueError("empty batch")
    logp = _log_softmax(_forward(spec, w, batch.x)[0])
    nll = -logp[np.arange(len(batch)), batch.y].mean()
    return float(nll + 0.5 * spec.l2 * np.dot(w, w))


def gradient(spec: ModelSpec, w: np.ndarray, data) -> np.ndarray:
    """Exact gradient of :func:`loss` at w."""
    batch = as_batch(data)
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    logits, hid = _forward(spec, w, batch.x)
    probs = np.exp(_log_softmax(logits))
    probs[np.arange(n), batch.y] -= 1.0
    delta = probs / n
    if spec.kind == "softmax-regression":
        gw = delta.T @ batch.x
        gb = delta.sum(axis=0)
        return np.concatenate([gw.ravel(), gb]) + spec.l2 * w
    w1, b1, w2, b2 = _unpack(spec, w)
    gw2 = delta.T @ hid
    gb2 = delta.sum(axis=0)
    dhid = (delta @ w2) * (1.0 - hid * hid)
    gw1 = dhid.T @ batch.x
    gb1 = dhid.sum(axis=0)
    return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2]) + spec.l2 * w


def accuracy(spec: ModelSpec, w: np.ndarray, data) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    batch = as_batch(data)
    if len(batch) == 0:
        raise ValueError("empty batch")
    pred = np.argmax(_forward(spec, w, batch.x)[0], axis=1)
    return float(np.mean(pred == batch.y))


def per_example_nll(spec: ModelSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Unregularized cross-entropy of every example (for pooled evaluation)."""
    logp = _log_softmax(_forward(spec, w, x)[0])
    return -logp[np.arange(x.shape[0]), y]


def per_example_correct(spec: ModelSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """1.0 where the argmax prediction matches the label, else 0.0."""
    pred = np.argmax(_forward(spec, w, x)[0], axis=1)
    return (pred == y).astype(np.float64)


@dataclass(frozen=True)
class LossProfile:
    """Strong-convexity and smoothness constants, empirically grounded.

    ``alpha`` is the analytic lower bound (the L2 coefficient) for the
    convex model and 0 for the mlp; ``beta`` is the largest observed
    gradient-difference ratio over the sampled pairs.
    """

    alpha: float
    beta: float
    samples: int
    convex: bool


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def smoothness_bound(spec: ModelSpec, data) -> float:
    """Analytic upper bound on the smoothness constant (convex model only).

    The cross-entropy Hessian in the logits is bounded by 1/2, so with the
    bias treated as an extra unit feature the loss curvature is at most
    max_i ||(x_i, 1)||^2 / 2 plus the L2 term.
    """
    if spec.kind != "softmax-regression":
        raise ValueError("analytic smoothness bound only available for softmax-regression")
    batch = as_batch(data)
    sq = (batch.x * batch.x).sum(axis=1).max() + 1.0
    return float(spec.l2 + 0.5 * sq)


def estimate_loss_profile(
    spec: ModelSpec,
    data,
    trials: int = 200,
    rng: np.random.Generator | None = None,
    radius: float = 1.0,
) -> LossProfile:
    """Estimate (alpha, beta) from the max gradient-difference ratio.

    Each trial picks a base point with norm up to ``radius`` and runs a few
    short-secant power-iteration steps, so the recorded ratios
    ||grad(w) - grad(w')|| / ||w - w'|| converge on the largest local
    curvature instead of the washed-out long-range ratio a random direction
    would give. Draws come from one fixed stream, so growing ``trials`` on
    the same generator state only refines the max upward.
    """
    batch = as_batch(data)
    if spec.kind == "softmax-regression" and spec.l2 <= 0:
        raise ValueError("softmax-regression profile requires l2 > 0")
    if rng is None:
        rng = np.random.default_rng(0)
    beta = 0.0
    d = spec.param_dim
    h = 1e-4 * max(radius, 1.0)
    for _ in range(trials):
        w = rng.uniform() * radius * _unit(rng.standard_normal(d))
        g_w = gradient(spec, w, batch)
        v = _unit(rng.standard_normal(d))
        for _ in range(6):
            diff = gradient(spec, w + h * v, batch) - g_w
            beta = max(beta, float(np.linalg.norm(diff) / h))
            norm = np.linalg.norm(diff)
            if norm == 0.0:
                break
            v = diff / norm
    if spec.kind == "mlp":
        return LossProfile(alpha=0.0, beta=beta, samples=trials, convex=False)
    return LossProfile(alpha=spec.l2, beta=max(beta, spec.l2), samples=trials, convex=True)


def gradient_descent(
    spec: ModelSpec,
    data,
    steps: int,
    lr: float,
    w0: np.ndarray | None = None,
    grad_tol: float = 0.0,
) -> np.ndarray:
    """Plain full-batch gradient descent, used as an independent optimizer."""
    batch = as_batch(data)
    w = np.zeros(spec.param_dim) if w0 is None else np.array(w0, dtype=np.float64)
    for _ in range(steps):
        g = gradient(spec, w, batch)
        if grad_tol > 0.0 and np.linalg.norm(g) <= grad_tol:
            break
        w = w - lr * g
    return w
