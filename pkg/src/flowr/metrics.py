"""Novelty-detection and classification metrics.

Scores follow one convention everywhere: higher means more novel. The
H-measure integrates the minimum achievable weighted misclassification
loss over a Beta-distributed cost; the implementation walks the ROC convex
hull in closed form and must agree with direct numerical integration over
a dense cost grid, which the tests enforce.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata


@dataclass(frozen=True)
class ScoreSet:
    """Novelty scores split by ground truth: positives are true-novel
    queries, negatives are known-class queries."""

    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positives, dtype=np.float64).ravel()
        neg = np.asarray(self.negatives, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "negatives", neg)


def _require_both(s: ScoreSet, what):
    if len(s.positives) == 0 or len(s.negatives) == 0:
        raise ValueError(f"{what} needs at least one positive and one negative score")


def roc_curve(s: ScoreSet):
    """Empirical ROC, one point per distinct threshold, ties grouped.

    Returns (fpr, tpr, thresholds) with thresholds descending from +inf,
    so the curve starts at (0, 0) and ends at (1, 1); a point counts as
    flagged novel when its score is >= the threshold.
    """
    _require_both(s, "roc_curve")
    pos = np.sort(s.positives)
    neg = np.sort(s.negatives)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    thresholds = np.concatenate([[np.inf], thresholds])
    tpr = (len(pos) - np.searchsorted(pos, thresholds, side="left")) / len(pos)
    fpr = (len(neg) - np.searchsorted(neg, thresholds, side="left")) / len(neg)
    return fpr, tpr, thresholds


def auroc(s: ScoreSet) -> float:
    """Area under the ROC; equals the Mann-Whitney statistic
    mean over pairs of 1[pos > neg] + 0.5 * 1[pos == neg]."""
    _require_both(s, "auroc")
    n_pos, n_neg = len(s.positives), len(s.negatives)
    ranks = rankdata(np.concatenate([s.negatives, s.positives]))
    u = ranks[n_neg:].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _upper_hull(fpr, tpr):
    hull = []
    for p in zip(fpr, tpr):
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def h_measure(s: ScoreSet, alpha=2.0, beta=2.0) -> float:
    """Hand's H-measure with a Beta(alpha, beta) cost distribution.

    For cost c, the weighted loss of a threshold t is
    c * pi0 * FPR(t) + (1 - c) * pi1 * FNR(t); L integrates the minimum
    over t (a vertex of the ROC upper hull) against the Beta density, and
    H = 1 - L / L_ref with L_ref the same integral for the best trivial
    (all-novel or all-known) classifier. 0 is chance, 1 is perfect.
    """
    _require_both(s, "h_measure")
    fpr, tpr, _ = roc_curve(s)
    order = np.argsort(fpr, kind="stable")
    hull = _upper_hull(fpr[order], tpr[order])

    n_pos, n_neg = len(s.positives), len(s.negatives)
    pi1 = n_pos / (n_pos + n_neg)
    pi0 = 1.0 - pi1
    mean_c = alpha / (alpha + beta)

    def cdf(x):
        return betainc(alpha, beta, x)

    def first_moment(x):
        # integral of c * Beta(alpha, beta) density over [0, x]
        return mean_c * betainc(alpha + 1.0, beta, x)

    def vertex_cost(f, t, lo, hi):
        int_c = first_moment(hi) - first_moment(lo)
        int_1 = cdf(hi) - cdf(lo)
        return pi0 * f * int_c + pi1 * (1.0 - t) * (int_1 - int_c)

    # breakpoint between hull vertices i and i+1: below it the higher
    # (more-novel-flagging) vertex wins, above it the lower one does
    breaks = []
    for (f1, t1), (f2, t2) in zip(hull[:-1], hull[1:]):
        df, dt = f2 - f1, t2 - t1
        breaks.append(pi1 * dt / (pi0 * df + pi1 * dt))

    loss = 0.0
    m = len(hull) - 1
    for i, (f, t) in enumerate(hull):
        lo = 0.0 if i == m else breaks[i]
        hi = 1.0 if i == 0 else breaks[i - 1]
        if hi > lo:
            loss += vertex_cost(f, t, lo, hi)

    loss_ref = vertex_cost(1.0, 1.0, 0.0, pi1) + vertex_cost(0.0, 0.0, pi1, 1.0)
    return float(1.0 - loss / loss_ref)


def threshold_at_tpr(s: ScoreSet, target_tpr):
    """Largest threshold flagging at least the target fraction of positives.

    Returns (threshold, achieved_tpr); the achieved rate can exceed the
    target when scores tie at the cut.
    """
    if not 0.0 < target_tpr <= 1.0:
        raise ValueError(f"target_tpr must be in (0, 1], got {target_tpr}")
    pos = np.sort(np.asarray(s.positives, dtype=np.float64))[::-1]
    if len(pos) == 0:
        raise ValueError("threshold_at_tpr needs at least one positive score")
    k = int(np.ceil(target_tpr * len(pos)))
    tau = float(pos[k - 1])
    achieved = float(np.count_nonzero(pos >= tau) / len(pos))
    return tau, achieved


@dataclass(frozen=True)
class EpisodeRecords:
    """Per-query records of one episode plus derived ground-truth flags.

    first_novel marks only the first encounter of each brand-new class;
    once its label has been seen, later queries of that class count as
    incremental. support_class marks classes known before the query phase.
    """

    records: tuple
    n_initial: int
    first_novel: np.ndarray = field(init=False)
    support_class: np.ndarray = field(init=False)
    incremental: np.ndarray = field(init=False)

    def __post_init__(self):
        records = tuple(self.records)
        if any(r.true_label is None for r in records):
            raise ValueError("episode records need true labels")
        true = np.array([r.true_label for r in records], dtype=np.int64)
        seen = np.array([r.n_at_prediction for r in records], dtype=np.int64)
        first_novel = true > seen
        support = true <= self.n_initial
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "first_novel", first_novel)
        object.__setattr__(self, "support_class", support)
        object.__setattr__(self, "incremental", ~first_novel & ~support)

    def __len__(self):
        return len(self.records)


def _pool(episodes):
    if isinstance(episodes, EpisodeRecords):
        episodes = [episodes]
    episodes = list(episodes)
    if not episodes or all(len(e) == 0 for e in episodes):
        raise ValueError("accuracy_suite needs at least one recorded query")
    records = [r for e in episodes for r in e.records]

    def cat(name):
        return np.concatenate([getattr(e, name) for e in episodes])

    return records, cat("first_novel"), cat("support_class"), cat("incremental")


def scores_from_records(episodes) -> ScoreSet:
    """Pool novelty scores: first encounters are positives, the rest negatives."""
    records, first_novel, _, _ = _pool(episodes)
    scores = np.array([r.novelty_score for r in records])
    return ScoreSet(positives=scores[first_novel], negatives=scores[~first_novel])


def _mean_or_none(mask, values):
    return float(np.mean(values[mask])) if np.any(mask) else None


def accuracy_suite(episodes, tau, *, alpha=2.0, beta=2.0) -> dict:
    """Accuracy decomposition at the operating threshold tau.

    A query is called novel iff its score >= tau; otherwise the known-class
    argmax is the prediction. First-encounter queries are correct when
    flagged novel; all others when not flagged and the argmax matches.
    Subsets with no queries report None rather than NaN. h_measure and
    auroc are threshold-free and computed from the pooled scores.
    """
    records, first_novel, support, incremental = _pool(episodes)
    scores = np.array([r.novelty_score for r in records])
    true = np.array([r.true_label for r in records], dtype=np.int64)
    argmax = np.array(
        [r.known_argmax if r.known_argmax is not None else -1 for r in records], dtype=np.int64
    )
    flagged = scores >= tau
    correct = np.where(first_novel, flagged, ~flagged & (argmax == true))

    have_both = np.any(first_novel) and not np.all(first_novel)
    score_set = (
        ScoreSet(positives=scores[first_novel], negatives=scores[~first_novel])
        if have_both
        else None
    )
    return {
        "accuracy": float(np.mean(correct)),
        "support_accuracy": _mean_or_none(support, correct),
        "incremental_accuracy": _mean_or_none(incremental, correct),
        "incremental_accuracy_with_first": _mean_or_none(incremental | first_novel, correct),
        "novel_detection_accuracy": _mean_or_none(first_novel, correct),
        "h_measure": h_measure(score_set, alpha, beta) if score_set else None,
        "auroc": auroc(score_set) if score_set else None,
        "n_queries": int(len(records)),
        "n_support": int(np.count_nonzero(support)),
        "n_incremental": int(np.count_nonzero(incremental)),
        "n_novel": int(np.count_nonzero(first_novel)),
    }


@dataclass(frozen=True)
class RankingFlip:
    """Two score sets on which AUROC and H-measure disagree about which
    classifier is better."""

    set_a: ScoreSet
    set_b: ScoreSet
    auroc_a: float
    auroc_b: float
    h_a: float
    h_b: float
    trials_used: int


def ranking_flip_search(rng, trials, *, n_scores=400, fixture_path=None):
    """Search random crossing-ROC score pairs for an AUROC/H-measure rank flip.

    Classifier A concentrates most positives far above the negatives but
    leaves a hard tail below them (an ROC that rises fast, then flattens);
    classifier B separates uniformly but weakly (a smooth ROC). The two
    curves cross, so the area and the cost-weighted loss can disagree.
    Returns the first flip found (optionally persisted to fixture_path as
    JSON) or None after exhausting the trials.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    for trial in range(trials):
        neg = rng.normal(0.0, 1.0, n_scores)
        w = rng.uniform(0.55, 0.85)
        head = rng.normal(rng.uniform(2.5, 4.0), 0.5, int(w * n_scores))
        tail = rng.normal(rng.uniform(-2.0, -0.5), 1.0, n_scores - len(head))
        set_a = ScoreSet(positives=np.concatenate([head, tail]), negatives=neg)
        set_b = ScoreSet(
            positives=rng.normal(rng.uniform(0.8, 1.6), 1.0, n_scores), negatives=neg
        )
        auroc_a, auroc_b = auroc(set_a), auroc(set_b)
        h_a, h_b = h_measure(set_a), h_measure(set_b)
        if (auroc_a - auroc_b) * (h_a - h_b) < 0:
            flip = RankingFlip(set_a, set_b, auroc_a, auroc_b, h_a, h_b, trial + 1)
            if fixture_path is not None:
                save_flip_fixture(flip, fixture_path)
            return flip
    return None


def save_flip_fixture(flip: RankingFlip, path):
    payload = {
        "a_positives": flip.set_a.positives.tolist(),
        "a_negatives": flip.set_a.negatives.tolist(),
        "b_positives": flip.set_b.positives.tolist(),
        "b_negatives": flip.set_b.negatives.tolist(),
        "auroc_a": flip.auroc_a,
        "auroc_b": flip.auroc_b,
        "h_a": flip.h_a,
        "h_b": flip.h_b,
        "trials_used": flip.trials_used,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_flip_fixture(path) -> RankingFlip:
    with open(path) as fh:
        payload = json.load(fh)
    return RankingFlip(
        set_a=ScoreSet(payload["a_positives"], payload["a_negatives"]),
        set_b=ScoreSet(payload["b_positives"], payload["b_negatives"]),
        auroc_a=payload["auroc_a"],
        auroc_b=payload["auroc_b"],
        h_a=payload["h_a"],
        h_b=payload["h_b"],
        trials_used=payload["trials_used"],
    )
