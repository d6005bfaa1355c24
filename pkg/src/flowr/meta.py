"""Episodic meta-training for both recognition settings.

Small-context episodes carry a labelled support set plus a query set in
which every unknown class shares one bucket label N + 1; large-context
episodes have no support and instead train per-class stats directly. The
episode loss is the query NLL read from the frozen post-support state (a
teacher-forced sequential variant is available for study) plus a weighted
adaptation loss that scores one-shot class instantiation on the novel pool.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import losses
from .crp import inverse_softplus
from .encoder import ClassEmbeddings, Encoder
from .gaussian import NaturalClassStats, SharedPrior


@dataclass(frozen=True)
class EpisodeConfig:
    n_support_classes: int
    n_novel_classes: int
    shots_min: int = 1
    shots_max: int = 10
    queries_per_class: int = 10

    def __post_init__(self):
        if self.n_support_classes < 0 or self.n_novel_classes < 0:
            raise ValueError("class counts must be non-negative")
        if not 1 <= self.shots_min <= self.shots_max:
            raise ValueError(f"bad shot range [{self.shots_min}, {self.shots_max}]")
        if self.queries_per_class < 1:
            raise ValueError("queries_per_class must be at least 1")


@dataclass
class Episode:
    """One sampled task. query_y uses dense known labels plus the shared
    novel bucket n_known + 1; adapt_(x, y) repeats the novel-class query
    points with their original identities densely renumbered."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    adapt_x: np.ndarray
    adapt_y: np.ndarray
    n_known: int
    support_rows: np.ndarray
    query_rows: np.ndarray
    query_class: np.ndarray
    known_classes: np.ndarray
    novel_classes: np.ndarray


@dataclass(frozen=True)
class MetaParams:
    """Trainable parameters: encoder, shared prior (precision in log space),
    raw CRP strength, plus per-class stats in the large-context setting."""

    encoder: Encoder
    q0: np.ndarray
    log_lambda0: float
    rho: float
    class_q: np.ndarray | None = None
    class_log_lambda: np.ndarray | None = None

    def prior(self) -> SharedPrior:
        return SharedPrior(prior=NaturalClassStats(q=self.q0, lam=float(np.exp(self.log_lambda0))))

    def class_embeddings(self) -> ClassEmbeddings:
        if self.class_q is None:
            raise ValueError("no per-class stats; this is a small-context parameter set")
        lam = np.exp(self.class_log_lambda)
        return ClassEmbeddings(means=self.class_q / lam[:, None], variances=1.0 / lam)


def init_meta_params(
    d,
    rng,
    *,
    setting="sc",
    encoder=None,
    embeddings: ClassEmbeddings | None = None,
    a=0.5,
    init_b=1.0,
) -> MetaParams:
    """Random initial parameters; large-context class stats come from
    pre-trained class embeddings."""
    encoder = encoder if encoder is not None else Encoder.identity()
    q0 = rng.normal(0.0, 0.1, size=d)
    kwargs = {}
    if setting == "lc":
        if embeddings is None:
            raise ValueError("large-context initialisation needs class embeddings")
        lam = 1.0 / embeddings.variances
        kwargs = dict(class_q=embeddings.means * lam[:, None], class_log_lambda=np.log(lam))
    elif setting != "sc":
        raise ValueError(f"unknown setting {setting!r}")
    return MetaParams(
        encoder=encoder, q0=q0, log_lambda0=0.0, rho=inverse_softplus(init_b + a), **kwargs
    )


def _pick_rows(rng, rows, k, what):
    if k > len(rows):
        raise ValueError(f"class has {len(rows)} points, needs {k} for {what}")
    return rng.choice(rows, size=k, replace=False)


def sample_sc_task(dataset, cfg: EpisodeConfig, rng) -> Episode:
    """Sample a small-context episode: dense support classes, shuffled query
    stream with novel points bucketed at N + 1, support/query rows disjoint."""
    needed = cfg.n_support_classes + cfg.n_novel_classes
    class_ids = np.asarray(dataset.class_ids)
    if needed > len(class_ids):
        raise ValueError(f"dataset has {len(class_ids)} classes, episode needs {needed}")
    chosen = rng.choice(class_ids, size=needed, replace=False)
    support_classes = chosen[: cfg.n_support_classes]
    novel_classes = chosen[cfg.n_support_classes :]

    support_rows, support_y = [], []
    query_rows, query_y, query_class = [], [], []
    for j, c in enumerate(support_classes):
        rows = dataset.class_rows(int(c))
        shots = int(rng.integers(cfg.shots_min, cfg.shots_max + 1))
        picked = _pick_rows(rng, rows, shots + cfg.queries_per_class, "support plus queries")
        support_rows.extend(picked[:shots])
        support_y.extend([j + 1] * shots)
        query_rows.extend(picked[shots:])
        query_y.extend([j + 1] * cfg.queries_per_class)
        query_class.extend([int(c)] * cfg.queries_per_class)
    bucket = cfg.n_support_classes + 1
    for c in novel_classes:
        rows = dataset.class_rows(int(c))
        picked = _pick_rows(rng, rows, cfg.queries_per_class, "novel queries")
        query_rows.extend(picked)
        query_y.extend([bucket] * cfg.queries_per_class)
        query_class.extend([int(c)] * cfg.queries_per_class)

    perm = rng.permutation(len(query_rows))
    query_rows = np.asarray(query_rows)[perm]
    query_y = np.asarray(query_y)[perm]
    query_class = np.asarray(query_class)[perm]
    support_rows = np.asarray(support_rows, dtype=np.int64)

    novel_mask = query_y == bucket
    novel_order = {int(c): m + 1 for m, c in enumerate(novel_classes)}
    adapt_y = np.array([novel_order[int(c)] for c in query_class[novel_mask]], dtype=np.int64)

    features = dataset.features_f64
    return Episode(
        support_x=features[support_rows],
        support_y=np.asarray(support_y, dtype=np.int64),
        query_x=features[query_rows],
        query_y=query_y.astype(np.int64),
        adapt_x=features[query_rows[novel_mask]],
        adapt_y=adapt_y,
        n_known=cfg.n_support_classes,
        support_rows=support_rows,
        query_rows=query_rows.astype(np.int64),
        query_class=query_class.astype(np.int64),
        known_classes=support_classes.astype(np.int64),
        novel_classes=np.asarray(novel_classes, dtype=np.int64),
    )


def sample_lc_task(dataset, cfg: EpisodeConfig, rng, known_classes) -> Episode:
    """Sample a large-context episode: no support; queries mix the fixed
    known-known classes with novel classes bucketed at N_kk + 1."""
    known_classes = np.asarray(known_classes, dtype=np.int64)
    n_kk = len(known_classes)
    rest = np.setdiff1d(np.asarray(dataset.class_ids), known_classes)
    if cfg.n_novel_classes > len(rest):
        raise ValueError(
            f"dataset has {len(rest)} classes outside the known list, "
            f"episode needs {cfg.n_novel_classes}"
        )
    novel_classes = rng.choice(rest, size=cfg.n_novel_classes, replace=False)

    query_rows, query_y, query_class = [], [], []
    for j, c in enumerate(known_classes):
        picked = _pick_rows(rng, dataset.class_rows(int(c)), cfg.queries_per_class, "queries")
        query_rows.extend(picked)
        query_y.extend([j + 1] * cfg.queries_per_class)
        query_class.extend([int(c)] * cfg.queries_per_class)
    bucket = n_kk + 1
    for c in novel_classes:
        picked = _pick_rows(rng, dataset.class_rows(int(c)), cfg.queries_per_class, "novel queries")
        query_rows.extend(picked)
        query_y.extend([bucket] * cfg.queries_per_class)
        query_class.extend([int(c)] * cfg.queries_per_class)

    perm = rng.permutation(len(query_rows))
    query_rows = np.asarray(query_rows)[perm]
    query_y = np.asarray(query_y)[perm]
    query_class = np.asarray(query_class)[perm]

    novel_mask = query_y == bucket
    novel_order = {int(c): m + 1 for m, c in enumerate(novel_classes)}
    adapt_y = np.array([novel_order[int(c)] for c in query_class[novel_mask]], dtype=np.int64)

    features = dataset.features_f64
    d = features.shape[1]
    return Episode(
        support_x=np.zeros((0, d)),
        support_y=np.zeros(0, dtype=np.int64),
        query_x=features[query_rows],
        query_y=query_y.astype(np.int64),
        adapt_x=features[query_rows[novel_mask]],
        adapt_y=adapt_y,
        n_known=n_kk,
        support_rows=np.zeros(0, dtype=np.int64),
        query_rows=query_rows.astype(np.int64),
        query_class=query_class.astype(np.int64),
        known_classes=known_classes,
        novel_classes=np.asarray(novel_classes, dtype=np.int64),
    )


def choose_conditioning(adapt_y, rng) -> np.ndarray:
    """One uniformly chosen conditioning row per adaptation class, in class order."""
    adapt_y = np.asarray(adapt_y, dtype=np.int64)
    n = int(adapt_y.max()) if adapt_y.size else 0
    return np.array(
        [int(rng.choice(np.flatnonzero(adapt_y == m + 1))) for m in range(n)], dtype=np.int64
    )


def adaptation_loss(prior: SharedPrior, noise, encoder: Encoder, adapt_pool, rng=None) -> float:
    """Mean NLL of one-shot instantiation on a pool of novel-class points.

    One sampled point per class conditions a fresh copy of the shared prior;
    the remaining points are classified under a uniform prior over the
    instantiated classes. A pool with no class of two or more points has
    nothing to score: the loss is 0 and a warning is emitted.
    """
    if isinstance(adapt_pool, tuple):
        X, labels = adapt_pool
    else:
        pairs = list(adapt_pool)
        X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs]) if pairs else np.zeros((0, prior.prior.dim))
        labels = np.array([int(y) for _, y in pairs], dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size:
        _, dense = np.unique(labels, return_inverse=True)
        labels = dense + 1

    if labels.size == 0 or np.max(np.bincount(labels)[1:], initial=0) < 2:
        warnings.warn("adaptation pool has no class with two points; loss is 0", RuntimeWarning)
        return 0.0

    rng = rng if rng is not None else np.random.default_rng(0)
    cond = choose_conditioning(labels, rng)
    Z = encoder(np.asarray(X, dtype=np.float64))
    value, *_ = losses._adaptation_term(
        np.asarray(prior.prior.q, dtype=np.float64),
        prior.prior.lam,
        noise.noise_variance,
        Z,
        labels,
        cond,
    )
    return value


def meta_grads(
    params: MetaParams,
    episode: Episode,
    lambda_w,
    setting,
    *,
    a=0.5,
    noise_variance=0.5,
    sequential=False,
    lc_init_count=1,
    novel_first_count=2,
    cond_seed=0,
) -> losses.MetaGrads:
    """Episode loss plus analytic gradients for every trainable parameter."""
    cond = choose_conditioning(episode.adapt_y, np.random.default_rng(cond_seed))
    w, b = params.encoder.params
    common = dict(
        a=a,
        noise_var=noise_variance,
        lambda_w=lambda_w,
        cond_idx=cond,
        novel_first_count=novel_first_count,
        sequential=sequential,
    )
    if setting == "sc":
        return losses.sc_meta_grads(
            w, b, params.q0, params.log_lambda0, params.rho, episode, **common
        )
    if setting == "lc":
        if params.class_q is None:
            raise ValueError("large-context loss needs per-class stats in MetaParams")
        if params.class_q.shape[0] != episode.n_known:
            raise ValueError(
                f"episode has {episode.n_known} known classes but params carry "
                f"{params.class_q.shape[0]}"
            )
        return losses.lc_meta_grads(
            w, b, params.q0, params.log_lambda0, params.rho,
            params.class_q, params.class_log_lambda, episode,
            lc_init_count=lc_init_count, **common,
        )
    raise ValueError(f"unknown setting {setting!r}")


def meta_loss(params, episode, lambda_w, setting, **kwargs) -> float:
    """Scalar episode objective: query NLL + lambda_w * adaptation loss."""
    return meta_grads(params, episode, lambda_w, setting, **kwargs).value


def meta_step(params: MetaParams, episodes, step_size, lambda_w, setting, *, rng=None, **kwargs):
    """One SGD step on a batch of episodes; aborts on non-finite gradients."""
    rng = rng if rng is not None else np.random.default_rng(0)
    vec = params_to_vector(params)
    acc = np.zeros_like(vec)
    stats = {"loss": 0.0, "nll": 0.0, "adapt": 0.0}
    for ep in episodes:
        g = meta_grads(
            params, ep, lambda_w, setting, cond_seed=int(rng.integers(2**31)), **kwargs
        )
        acc += grads_to_vector(params, g)
        stats["loss"] += g.value
        stats["nll"] += g.nll
        stats["adapt"] += g.adapt
    n = len(episodes)
    acc /= n
    for key in stats:
        stats[key] /= n
    if not (np.all(np.isfinite(acc)) and np.isfinite(stats["loss"])):
        raise FloatingPointError(
            f"meta-training diverged: loss = {stats['loss']}; reduce step_size"
        )
    return vector_to_params(params, vec - step_size * acc), stats


def run_meta_training(
    dataset,
    *,
    cfg: EpisodeConfig,
    setting="sc",
    n_episodes=1000,
    batch_size=1,
    step_size=1e-3,
    lambda_w=0.1,
    seed=0,
    init: MetaParams | None = None,
    known_classes=None,
    **kwargs,
):
    """Sample episodes and descend the meta objective; returns (params, trace)."""
    rng = np.random.default_rng(seed)
    if init is None:
        init = init_meta_params(dataset.dim, rng, setting=setting, a=kwargs.get("a", 0.5))
    params = init
    trace = []
    done = 0
    while done < n_episodes:
        k = min(batch_size, n_episodes - done)
        if setting == "sc":
            eps = [sample_sc_task(dataset, cfg, rng) for _ in range(k)]
        else:
            eps = [sample_lc_task(dataset, cfg, rng, known_classes) for _ in range(k)]
        params, stats = meta_step(
            params, eps, step_size, lambda_w, setting, rng=rng, **kwargs
        )
        done += k
        trace.append({"step": len(trace), "episodes": done, **stats})
    return params, trace


# ---------------------------------------------------------------------------
# parameter packing and the finite-difference certificate

def params_to_vector(params: MetaParams) -> np.ndarray:
    parts = []
    if params.encoder.kind == "affine":
        parts += [params.encoder.weight.ravel(), params.encoder.bias]
    parts += [np.asarray(params.q0, dtype=np.float64), [params.log_lambda0], [params.rho]]
    if params.class_q is not None:
        parts += [params.class_q.ravel(), params.class_log_lambda]
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def vector_to_params(template: MetaParams, vec) -> MetaParams:
    vec = np.asarray(vec, dtype=np.float64)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(vec):
            raise ValueError(f"vector has {len(vec)} entries, parameters need at least {pos + n}")
        out = vec[pos : pos + n]
        pos += n
        return out

    encoder = template.encoder
    if encoder.kind == "affine":
        w_shape = encoder.weight.shape
        weight = take(w_shape[0] * w_shape[1]).reshape(w_shape)
        bias = take(w_shape[0]).copy()
        encoder = Encoder.affine(weight, bias)
    q0 = take(len(template.q0)).copy()
    log_lambda0 = float(take(1)[0])
    rho = float(take(1)[0])
    out = replace(template, encoder=encoder, q0=q0, log_lambda0=log_lambda0, rho=rho)
    if template.class_q is not None:
        shape = template.class_q.shape
        class_q = take(shape[0] * shape[1]).reshape(shape)
        class_log_lambda = take(shape[0]).copy()
        out = replace(out, class_q=class_q, class_log_lambda=class_log_lambda)
    if pos != len(vec):
        raise ValueError(f"vector has {len(vec)} entries, parameters need {pos}")
    return out


def grads_to_vector(template: MetaParams, g: losses.MetaGrads) -> np.ndarray:
    parts = []
    if template.encoder.kind == "affine":
        parts += [g.d_weight.ravel(), g.d_bias]
    parts += [g.d_q0, [g.d_log_lambda0], [g.d_rho]]
    if template.class_q is not None:
        parts += [g.d_class_q.ravel(), g.d_class_log_lambda]
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def grad_check(loss_fn, grad_fn, params, *, step=1e-4, max_coords=200, rng=None):
    """Max relative error between grad_fn and central finite differences.

    Uses h_i = step * max(1, |x_i|) per coordinate; every coordinate is
    checked up to max_coords, beyond which a seeded random subset is used.
    The per-coordinate denominator is floored at 1% of the largest gradient
    magnitude so that coordinates sitting at the finite-difference noise
    floor do not dominate the report.
    """
    x = np.asarray(params, dtype=np.float64)
    analytic = np.asarray(grad_fn(x), dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"gradient shape {analytic.shape} does not match params {x.shape}")
    dim = x.size
    if dim <= max_coords:
        coords = np.arange(dim)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(dim, size=max_coords, replace=False)

    numeric = np.zeros(len(coords))
    for j, i in enumerate(coords):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        numeric[j] = (loss_fn(xp) - loss_fn(xm)) / (2.0 * h)

    picked = analytic[coords]
    scale = max(np.max(np.abs(picked), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    denom = np.maximum(np.maximum(np.abs(picked), np.abs(numeric)), 0.01 * scale)
    return float(np.max(np.abs(picked - numeric) / denom))


def meta_loss_functions(template: MetaParams, episode, lambda_w, setting, **kwargs):
    """(loss_fn, grad_fn) over the flat parameter vector, for grad_check."""

    def loss_fn(vec):
        return meta_loss(vector_to_params(template, vec), episode, lambda_w, setting, **kwargs)

    def grad_fn(vec):
        g = meta_grads(vector_to_params(template, vec), episode, lambda_w, setting, **kwargs)
        return grads_to_vector(template, g)

    return loss_fn, grad_fn
