"""Distance-based open-set baselines over running class means.

Nearest-class-mean and prototypical-network heads share one piece of
bookkeeping: per-class feature sums and counts, updated online after every
revealed label. Their novelty score is the Euclidean distance to the
nearest prototype (higher = more novel), so the evaluation pipeline can
consume them interchangeably with the probabilistic model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import PredictionRecord, ProtocolError


@dataclass(frozen=True)
class PrototypeState:
    """Per-class running means stored as (sums, counts). threshold is an
    optional reference cutoff; decisions are made by the evaluator."""

    sums: np.ndarray
    counts: np.ndarray
    threshold: float | None = None

    def __post_init__(self):
        sums = np.asarray(self.sums, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if sums.ndim != 2:
            raise ValueError(f"sums must be (n_classes, dim), got shape {sums.shape}")
        if counts.shape != (sums.shape[0],):
            raise ValueError("one count per class required")
        if np.any(counts < 1):
            raise ValueError("instantiated classes need at least one observation")
        if not np.all(np.isfinite(sums)):
            raise ValueError("prototype sums must be finite")
        object.__setattr__(self, "sums", sums)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, dim) -> "PrototypeState":
        return cls(sums=np.zeros((0, dim)), counts=np.zeros(0, dtype=np.int64))

    @classmethod
    def from_means(cls, means, counts=None) -> "PrototypeState":
        means = np.asarray(means, dtype=np.float64)
        if counts is None:
            counts = np.ones(means.shape[0], dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        return cls(sums=means * counts[:, None], counts=counts)

    @property
    def n_classes(self) -> int:
        return self.sums.shape[0]

    @property
    def means(self) -> np.ndarray:
        return self.sums / self.counts[:, None]


def prototype_update(state: PrototypeState, z, y) -> PrototypeState:
    """Fold one labelled point into the running means; y = N + 1 appends."""
    z = np.asarray(z, dtype=np.float64)
    n = state.n_classes
    y = int(y)
    if not 1 <= y <= n + 1:
        raise ProtocolError(f"label {y} outside 1..{n + 1}")
    if y == n + 1:
        return replace(
            state,
            sums=np.vstack([state.sums, z[None, :]]) if n else z[None, :].copy(),
            counts=np.append(state.counts, 1),
        )
    sums = state.sums.copy()
    counts = state.counts.copy()
    sums[y - 1] += z
    counts[y - 1] += 1
    return replace(state, sums=sums, counts=counts)


def _distances(state: PrototypeState, z):
    diff = state.means - np.asarray(z, dtype=np.float64)[None, :]
    return np.sqrt(np.einsum("nd,nd->n", diff, diff))


def protonet_predict(state: PrototypeState, z):
    """Softmax over negative squared prototype distances plus the nearest
    distance as novelty score; no classes yet means an infinitely novel point."""
    if state.n_classes == 0:
        return np.zeros(0), np.inf
    dist = _distances(state, z)
    logits = -dist**2
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum(), float(dist.min())


def ncm_predict(state: PrototypeState, z):
    """Nearest class mean: (1-based argmin class, Euclidean distance)."""
    if state.n_classes == 0:
        return None, np.inf
    dist = _distances(state, z)
    best = int(np.argmin(dist))
    return best + 1, float(dist[best])


def init_prototypes(support, dim) -> PrototypeState:
    """Prototype state from a labelled support stream in arrival order."""
    state = PrototypeState.empty(dim)
    for i, (x, y) in enumerate(support):
        try:
            state = prototype_update(state, x, y)
        except ProtocolError as exc:
            raise ProtocolError(f"support point {i}: {exc}") from exc
    return state


def run_baseline_episode(state: PrototypeState, queries, method="ncm", encoder=None):
    """Predict-then-update over a query stream, mirroring the probabilistic
    episode loop; returns the per-query records and the final state."""
    if method not in ("ncm", "protonet"):
        raise ValueError(f"unknown baseline {method!r}")
    records = []
    for i, (x, y) in enumerate(queries):
        z = encoder(x) if encoder is not None else np.asarray(x, dtype=np.float64)
        n = state.n_classes
        if method == "protonet":
            probs, score = protonet_predict(state, z)
            best = int(np.argmax(probs)) + 1 if n else None
            probs_out = probs
        else:
            best, score = ncm_predict(state, z)
            probs_out = None
        records.append(
            PredictionRecord(
                probs=probs_out,
                predicted=best,
                known_argmax=best,
                novelty_score=score,
                n_at_prediction=n,
                true_label=int(y),
            )
        )
        try:
            state = prototype_update(state, z, y)
        except ProtocolError as exc:
            raise ProtocolError(f"query {i}: {exc}") from exc
    return records, state
