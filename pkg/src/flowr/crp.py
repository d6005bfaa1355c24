"""Two-parameter Chinese restaurant process over class labels.

Class counts plus a discount a and strength b give a predictive distribution
over "one of the N seen classes" versus "a brand-new class". b is derived
from an unconstrained parameter rho via b = softplus(rho) - a so that b > -a
holds by construction and rho can be trained by plain gradient descent while
a stays fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def softplus(x):
    return float(np.logaddexp(0.0, x))


def sigmoid(x):
    return float(0.5 * (1.0 + np.tanh(0.5 * x)))


def inverse_softplus(y):
    # y = log(1 + exp(rho))  =>  rho = y + log(1 - exp(-y)), valid for y > 0
    if y <= 0.0:
        raise ValueError(f"softplus output must be positive, got {y}")
    return float(y + np.log1p(-np.exp(-y)))


class InvalidStateError(ValueError):
    """Raised when the count/parameter state admits no valid predictive."""


@dataclass(frozen=True)
class CrpParams:
    """Discount a (fixed hyperparameter) and raw strength parameter rho."""

    a: float
    rho: float

    def __post_init__(self):
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "rho", float(self.rho))
        if not (0.0 <= self.a < 1.0):
            raise ValueError(f"discount a must lie in [0, 1), got {self.a}")
        if not np.isfinite(self.rho):
            raise ValueError("rho must be finite")

    @property
    def b(self) -> float:
        return softplus(self.rho) - self.a

    @classmethod
    def from_b(cls, a, b) -> "CrpParams":
        """Build params with an explicit strength b > -a."""
        return cls(a=a, rho=inverse_softplus(float(b) + float(a)))


@dataclass(frozen=True)
class ClassCounts:
    """Per-class observation counts; updates return new values."""

    counts: np.ndarray

    def __post_init__(self):
        # owned copy: freezing an aliased caller array would be a side effect
        c = np.array(self.counts, dtype=np.int64)
        if c.ndim != 1:
            raise ValueError(f"counts must be a 1-d vector, got shape {c.shape}")
        if np.any(c < 0):
            raise ValueError("counts must be non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @classmethod
    def empty(cls) -> "ClassCounts":
        return cls(counts=np.zeros(0, dtype=np.int64))

    @classmethod
    def zeros(cls, n) -> "ClassCounts":
        return cls(counts=np.zeros(int(n), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def observe(counts: ClassCounts, y: int) -> ClassCounts:
    """Increment the count of existing class y (1-based)."""
    n = counts.n_classes
    if not 1 <= y <= n:
        raise ValueError(f"label {y} outside existing classes 1..{n}")
    c = counts.counts.copy()
    c[y - 1] += 1
    return ClassCounts(counts=c)


def instantiate(counts: ClassCounts) -> ClassCounts:
    """Append a brand-new class with count 1."""
    return ClassCounts(counts=np.append(counts.counts, 1))


def predictive_class_probs(counts: ClassCounts, params: CrpParams) -> np.ndarray:
    """Predictive over the N existing classes plus one novel slot (length N + 1).

    p[n] = max(k_n - a, 0) / (k + b) for existing classes and
    p[novel] = (b + a * N+) / (k + b) where N+ counts classes with k_n > 0,
    renormalised. Zero-count classes keep exactly zero mass; when no class has
    a zero count the raw rule already sums to one and the renormalisation is
    a no-op up to rounding.
    """
    a, b = params.a, params.b
    k = counts.total
    n = counts.n_classes
    if n == 0:
        return np.array([1.0])
    if k == 0 and b <= 0.0:
        raise InvalidStateError(f"no observations and b = {b} <= 0 leaves no probability mass")
    c = counts.counts.astype(np.float64)
    n_pos = int(np.count_nonzero(c))
    numer = np.append(np.maximum(c - a, 0.0), b + a * n_pos)
    denom = k + b
    if denom <= 0.0:
        raise InvalidStateError(f"k + b = {denom} is not positive")
    p = numer / denom
    total = p.sum()
    if total <= 0.0:
        raise InvalidStateError("predictive has no mass to normalise")
    return p / total


def sequence_log_prob(labels, params: CrpParams) -> float:
    """Log probability of a dense label sequence under the sequential predictive.

    Labels are 1-based and must obey the arrival protocol: the first point of
    class m may appear only after classes 1..m-1 have appeared. Each
    observation adds one to its class count, so the value depends only on the
    induced partition (exchangeability).
    """
    counts = ClassCounts.empty()
    total = 0.0
    for i, y in enumerate(labels):
        y = int(y)
        n = counts.n_classes
        if not 1 <= y <= n + 1:
            raise ValueError(f"label {y} at position {i} violates the arrival protocol (seen {n} classes)")
        p = predictive_class_probs(counts, params)
        if p[y - 1] <= 0.0:
            raise InvalidStateError(f"label {y} at position {i} has zero predictive probability")
        total += float(np.log(p[y - 1]))
        counts = instantiate(counts) if y == n + 1 else observe(counts, y)
    return total
