"""Training losses with hand-derived analytic gradients.

Every loss here is a composition of an affine encoder, isotropic Gaussian
log-densities, and a softmax negative log-likelihood, so reverse-mode
differentiation is a short chain worked out once:

    logits[m, c] = log pi[c] - d/2 log(2 pi v_c) - ||z_m - mu_c||^2 / (2 v_c)
    nll          = mean_m ( logsumexp_c logits[m, :] - logits[m, y_m] )

With G[m, c] = (softmax(logits)[m, c] - 1[c == y_m]) / M:

    d nll / d mu_c   = sum_m G[m, c] (z_m - mu_c) / v_c
    d nll / d v_c    = sum_m G[m, c] (-d / (2 v_c) + ||z_m - mu_c||^2 / (2 v_c^2))
    d nll / d z_m    = -sum_c G[m, c] (z_m - mu_c) / v_c
    d nll / d logpi_c = sum_m G[m, c]

Class parameters enter through mu_c = Q_c / lam_c and v_c = 1 / lam_c + s_eps:

    d nll / d Q_c   = (d nll / d mu_c) / lam_c
    d nll / d lam_c = -((d nll / d mu_c) . Q_c + d nll / d v_c) / lam_c^2

and the CRP strength b reaches the loss only through the class prior
pi_c = u_c / T with T = sum(u), u_novel = b + a N+, so

    d logpi_c / d b = 1[c == novel] / u_novel - 1 / T.

All gradients are certified against central finite differences by grad_check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crp import ClassCounts, CrpParams, predictive_class_probs, sigmoid
from .gaussian import log_density_matrix


def logsumexp(x, axis=-1):
    """Stable log-sum-exp tolerating -inf entries (but not all--inf rows)."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def encode(weight, bias, H):
    """Apply an affine encoder row-wise; weight=None means identity."""
    H = np.asarray(H, dtype=np.float64)
    if weight is None:
        return H
    return H @ weight.T + bias


def _mixture_nll_grads(Z, y_idx, means, variances, log_prior):
    """Mean NLL of a Gaussian mixture classifier plus gradients.

    Z: (m, d) points, y_idx: (m,) 0-based targets, means: (c, d),
    variances: (c,), log_prior: (c,) possibly containing -inf.
    Returns (nll, d_means, d_variances, d_Z, d_log_prior).
    """
    m, d = Z.shape
    logf = log_density_matrix(Z, means, variances)
    logits = logf + log_prior[None, :]
    lse = logsumexp(logits, axis=1)
    nll = float(np.mean(lse - logits[np.arange(m), y_idx]))

    P = np.exp(logits - lse[:, None])
    G = P.copy()
    G[np.arange(m), y_idx] -= 1.0
    G /= m

    diff = Z[:, None, :] - means[None, :, :]          # (m, c, d)
    r = diff / variances[None, :, None]               # (z - mu) / v
    sq = np.einsum("mcd,mcd->mc", diff, diff)

    d_means = np.einsum("mc,mcd->cd", G, r)
    d_vars = np.einsum(
        "mc,mc->c", G, -d / (2.0 * variances)[None, :] + sq / (2.0 * variances**2)[None, :]
    )
    d_Z = -np.einsum("mc,mcd->md", G, r)
    d_log_prior = G.sum(axis=0)
    return nll, d_means, d_vars, d_Z, d_log_prior


def _natural_chain(d_means, d_vars, Q, lam):
    """Chain gradients from (mu, v) back to natural parameters (Q, lam)."""
    d_Q = d_means / lam[:, None]
    d_lam = -(np.einsum("cd,cd->c", d_means, Q) + d_vars) / lam**2
    return d_Q, d_lam


def _log_prior_from_counts(counts, params):
    p = predictive_class_probs(ClassCounts(counts=np.asarray(counts, dtype=np.int64)), params)
    with np.errstate(divide="ignore"):
        return np.log(p)


def _d_b_from_log_prior(d_log_prior, counts, params):
    """d loss / d b given d loss / d logpi under the renormalised CRP rule.

    With no zero-count classes the renormalisation is exact and pi = u / T,
    where only the novel numerator u_novel = b + a N+ depends on b.
    """
    a, b = params.a, params.b
    c = np.asarray(counts, dtype=np.float64)
    n_pos = int(np.count_nonzero(c))
    u = np.append(np.maximum(c - a, 0.0), b + a * n_pos)
    T = u.sum()
    d_b = d_log_prior[-1] / u[-1] - d_log_prior.sum() / T
    return float(d_b)


def support_sums(Z, labels, n_classes):
    """Per-class embedding sums and counts for a dense-labelled support set."""
    labels = np.asarray(labels, dtype=np.int64)
    d = Z.shape[1]
    S = np.zeros((n_classes, d))
    K = np.zeros(n_classes, dtype=np.int64)
    for z, y in zip(Z, labels):
        S[y - 1] += z
        K[y - 1] += 1
    return S, K


@dataclass
class MetaGrads:
    """Loss value, component terms, and gradients for one episode."""

    value: float
    nll: float
    adapt: float
    d_weight: np.ndarray | None
    d_bias: np.ndarray | None
    d_q0: np.ndarray
    d_log_lambda0: float
    d_rho: float
    d_class_q: np.ndarray | None = None
    d_class_log_lambda: np.ndarray | None = None


class _EncoderTape:
    """Accumulates d loss / d embedding per raw input row."""

    def __init__(self, weight, bias, H):
        self.weight = weight
        self.H = np.asarray(H, dtype=np.float64)
        self.Z = encode(weight, bias, H)
        self.dZ = np.zeros_like(self.Z)

    def grads(self):
        if self.weight is None:
            return None, None
        return self.dZ.T @ self.H, self.dZ.sum(axis=0)


def _adaptation_term(q0, lam0, noise_var, Za, adapt_labels, cond_idx):
    """Adaptation loss on novel-class data plus gradients.

    One conditioning point per class (cond_idx, one row index per class, in
    class order) builds a fresh posterior from the shared prior; the
    remaining points are classified under a uniform class prior. Classes
    with a single point contribute no query terms. Returns
    (loss, d_q0, d_lam0, d_Za) with zeros when there is nothing to score.
    """
    adapt_labels = np.asarray(adapt_labels, dtype=np.int64)
    n_classes = int(adapt_labels.max()) if adapt_labels.size else 0
    d_q0 = np.zeros_like(q0)
    d_Za = np.zeros_like(Za)
    if n_classes == 0:
        return 0.0, d_q0, 0.0, d_Za

    inv = 1.0 / noise_var
    cond_idx = np.asarray(cond_idx, dtype=np.int64)
    Qa = q0[None, :] + Za[cond_idx] * inv
    lama = np.full(n_classes, lam0 + inv)
    query_mask = np.ones(len(adapt_labels), dtype=bool)
    query_mask[cond_idx] = False
    if not query_mask.any() or n_classes == 1:
        # one-class pools score log(1) = 0; empty pools have nothing to score
        return 0.0, d_q0, 0.0, d_Za

    Zq = Za[query_mask]
    yq = adapt_labels[query_mask] - 1
    means = Qa / lama[:, None]
    variances = 1.0 / lama + noise_var
    log_prior = np.zeros(n_classes)
    nll, d_means, d_vars, d_Zq, _ = _mixture_nll_grads(Zq, yq, means, variances, log_prior)
    d_Qa, d_lama = _natural_chain(d_means, d_vars, Qa, lama)

    d_q0 = d_Qa.sum(axis=0)
    d_lam0 = float(d_lama.sum())
    d_Za[query_mask] += d_Zq
    d_Za[cond_idx] += d_Qa * inv
    return nll, d_q0, d_lam0, d_Za


def sc_meta_grads(
    weight,
    bias,
    q0,
    log_lambda0,
    rho,
    episode,
    *,
    a,
    noise_var,
    lambda_w,
    cond_idx,
    novel_first_count=2,
    sequential=False,
):
    """Small-context episode loss and gradients w.r.t. (encoder, q0, log lam0, rho)."""
    lam0 = float(np.exp(log_lambda0))
    params = CrpParams(a=a, rho=rho)
    inv = 1.0 / noise_var

    sup = _EncoderTape(weight, bias, episode.support_x)
    qry = _EncoderTape(weight, bias, episode.query_x)
    n = episode.n_known
    S, K = support_sums(sup.Z, episode.support_y, n)
    counts = K + (novel_first_count - 1)

    d_q0 = np.zeros_like(np.asarray(q0, dtype=np.float64))
    q0 = np.asarray(q0, dtype=np.float64)
    d_lam0 = 0.0
    d_b = 0.0

    if sequential:
        nll, d_q0_s, d_lam0_s, d_b = _sequential_nll(
            qry, q0, lam0, inv, noise_var, params,
            init_Q=q0[None, :] + S * inv,
            init_lam=lam0 + K * inv,
            init_counts=counts.copy(),
            init_contrib=_support_contrib(episode.support_y, n),
            support_tape=sup,
            class_origin=["prior"] * n,
            novel_first_count=novel_first_count,
            labels=episode.query_y,
        )
        d_q0 += d_q0_s
        d_lam0 += d_lam0_s
    else:
        Q = np.vstack([q0[None, :] + S * inv, q0[None, :]])
        lam = np.append(lam0 + K * inv, lam0)
        log_prior = _log_prior_from_counts(counts, params)
        means = Q / lam[:, None]
        variances = 1.0 / lam + noise_var
        yq = np.asarray(episode.query_y, dtype=np.int64) - 1
        nll, d_means, d_vars, d_Zq, d_log_prior = _mixture_nll_grads(
            qry.Z, yq, means, variances, log_prior
        )
        d_Q, d_lam = _natural_chain(d_means, d_vars, Q, lam)
        d_q0 += d_Q.sum(axis=0)
        d_lam0 += float(d_lam.sum())
        qry.dZ += d_Zq
        for i, y in enumerate(episode.support_y):
            sup.dZ[i] += d_Q[y - 1] * inv
        d_b = _d_b_from_log_prior(d_log_prior, counts, params)

    adapt = _EncoderTape(weight, bias, episode.adapt_x) if len(episode.adapt_x) else None
    adapt_val = 0.0
    if adapt is not None and lambda_w != 0.0:
        adapt_val, da_q0, da_lam0, da_Z = _adaptation_term(
            q0, lam0, noise_var, adapt.Z, episode.adapt_y, cond_idx
        )
        d_q0 += lambda_w * da_q0
        d_lam0 += lambda_w * da_lam0
        adapt.dZ += lambda_w * da_Z

    d_weight, d_bias = _merge_encoder_grads([sup, qry] + ([adapt] if adapt is not None else []))
    return MetaGrads(
        value=nll + lambda_w * adapt_val,
        nll=nll,
        adapt=adapt_val,
        d_weight=d_weight,
        d_bias=d_bias,
        d_q0=d_q0,
        d_log_lambda0=d_lam0 * lam0,
        d_rho=d_b * sigmoid(rho),
    )


def lc_meta_grads(
    weight,
    bias,
    q0,
    log_lambda0,
    rho,
    class_q,
    class_log_lambda,
    episode,
    *,
    a,
    noise_var,
    lambda_w,
    cond_idx,
    lc_init_count=1,
    novel_first_count=2,
    sequential=False,
):
    """Large-context episode loss and gradients; class stats are free parameters."""
    lam0 = float(np.exp(log_lambda0))
    params = CrpParams(a=a, rho=rho)
    inv = 1.0 / noise_var
    q0 = np.asarray(q0, dtype=np.float64)
    class_q = np.asarray(class_q, dtype=np.float64)
    class_lam = np.exp(np.asarray(class_log_lambda, dtype=np.float64))
    n = class_q.shape[0]
    counts = np.full(n, int(lc_init_count), dtype=np.int64)

    qry = _EncoderTape(weight, bias, episode.query_x)
    d_q0 = np.zeros_like(q0)
    d_lam0 = 0.0
    d_class_q = np.zeros_like(class_q)
    d_class_lam = np.zeros_like(class_lam)

    if sequential:
        nll, grads = _sequential_nll_lc(
            qry, q0, lam0, inv, noise_var, params,
            class_q=class_q, class_lam=class_lam, counts=counts.copy(),
            novel_first_count=novel_first_count, labels=episode.query_y,
        )
        d_q0 += grads["q0"]
        d_lam0 += grads["lam0"]
        d_class_q += grads["class_q"]
        d_class_lam += grads["class_lam"]
        d_b = grads["b"]
    else:
        Q = np.vstack([class_q, q0[None, :]])
        lam = np.append(class_lam, lam0)
        log_prior = _log_prior_from_counts(counts, params)
        means = Q / lam[:, None]
        variances = 1.0 / lam + noise_var
        yq = np.asarray(episode.query_y, dtype=np.int64) - 1
        nll, d_means, d_vars, d_Zq, d_log_prior = _mixture_nll_grads(
            qry.Z, yq, means, variances, log_prior
        )
        d_Q, d_lam = _natural_chain(d_means, d_vars, Q, lam)
        d_class_q += d_Q[:n]
        d_class_lam += d_lam[:n]
        d_q0 += d_Q[n]
        d_lam0 += float(d_lam[n])
        qry.dZ += d_Zq
        d_b = _d_b_from_log_prior(d_log_prior, counts, params)

    adapt = _EncoderTape(weight, bias, episode.adapt_x) if len(episode.adapt_x) else None
    adapt_val = 0.0
    if adapt is not None and lambda_w != 0.0:
        adapt_val, da_q0, da_lam0, da_Z = _adaptation_term(
            q0, lam0, noise_var, adapt.Z, episode.adapt_y, cond_idx
        )
        d_q0 += lambda_w * da_q0
        d_lam0 += lambda_w * da_lam0
        adapt.dZ += lambda_w * da_Z

    d_weight, d_bias = _merge_encoder_grads([qry] + ([adapt] if adapt is not None else []))
    return MetaGrads(
        value=nll + lambda_w * adapt_val,
        nll=nll,
        adapt=adapt_val,
        d_weight=d_weight,
        d_bias=d_bias,
        d_q0=d_q0,
        d_log_lambda0=d_lam0 * lam0,
        d_rho=d_b * sigmoid(rho),
        d_class_q=d_class_q,
        d_class_log_lambda=d_class_lam * class_lam,
    )


def _support_contrib(support_y, n_classes):
    contrib = [[] for _ in range(n_classes)]
    for i, y in enumerate(support_y):
        contrib[y - 1].append(("support", i))
    return contrib


def _sequential_nll(
    qry, q0, lam0, inv, noise_var, params, *,
    init_Q, init_lam, init_counts, init_contrib, support_tape,
    class_origin, novel_first_count, labels,
):
    """Teacher-forced query pass for the small-context setting.

    The count trajectory is fixed by the labels, so only the Gaussian stats
    carry parameter dependence across steps; each class keeps the list of
    embeddings that conditioned it so that per-step dQ can be scattered back.
    """
    Q = init_Q.copy()
    lam = init_lam.copy()
    counts = init_counts.copy()
    contrib = [list(c) for c in init_contrib]
    labels = np.asarray(labels, dtype=np.int64)
    m = len(labels)
    total = 0.0
    d_q0 = np.zeros_like(q0)
    d_lam0 = 0.0
    d_b = 0.0

    for j, y in enumerate(labels):
        n = Q.shape[0]
        Qp = np.vstack([Q, q0[None, :]])
        lamp = np.append(lam, lam0)
        log_prior = _log_prior_from_counts(counts, params)
        means = Qp / lamp[:, None]
        variances = 1.0 / lamp + noise_var
        z = qry.Z[j : j + 1]
        nll, d_means, d_vars, d_Z, d_log_prior = _mixture_nll_grads(
            z, np.array([y - 1]), means, variances, log_prior
        )
        total += nll
        d_Qp, d_lamp = _natural_chain(d_means, d_vars, Qp, lamp)
        d_q0 += d_Qp.sum(axis=0)      # every slot's Q contains one copy of q0
        d_lam0 += float(d_lamp.sum())
        qry.dZ[j] += d_Z[0]
        for c in range(n):
            for kind, i in contrib[c]:
                if kind == "support":
                    support_tape.dZ[i] += d_Qp[c] * inv
                else:
                    qry.dZ[i] += d_Qp[c] * inv
        d_b += _d_b_from_log_prior(d_log_prior, counts, params)

        # teacher-forced update with the true label
        if y == n + 1:
            Q = np.vstack([Q, q0[None, :] + z[0] * inv])
            lam = np.append(lam, lam0 + inv)
            counts = np.append(counts, novel_first_count)
            contrib.append([("query", j)])
        elif y <= n:
            counts[y - 1] += 1
            Q[y - 1] = Q[y - 1] + z[0] * inv
            lam[y - 1] += inv
            contrib[y - 1].append(("query", j))
        else:
            raise ValueError(f"query {j}: label {y} skips ahead of the {n} known classes")

    scale = 1.0 / m
    qry.dZ *= scale
    support_tape.dZ *= scale
    return total * scale, d_q0 * scale, d_lam0 * scale, d_b * scale


def _sequential_nll_lc(
    qry, q0, lam0, inv, noise_var, params, *,
    class_q, class_lam, counts, novel_first_count, labels,
):
    """Teacher-forced query pass for the large-context setting."""
    n_kk = class_q.shape[0]
    Q = class_q.copy()
    lam = class_lam.copy()
    contrib = [[] for _ in range(n_kk)]
    labels = np.asarray(labels, dtype=np.int64)
    m = len(labels)
    total = 0.0
    g = {
        "q0": np.zeros_like(q0),
        "lam0": 0.0,
        "class_q": np.zeros_like(class_q),
        "class_lam": np.zeros(n_kk),
        "b": 0.0,
    }

    for j, y in enumerate(labels):
        n = Q.shape[0]
        Qp = np.vstack([Q, q0[None, :]])
        lamp = np.append(lam, lam0)
        log_prior = _log_prior_from_counts(counts, params)
        means = Qp / lamp[:, None]
        variances = 1.0 / lamp + noise_var
        z = qry.Z[j : j + 1]
        nll, d_means, d_vars, d_Z, d_log_prior = _mixture_nll_grads(
            z, np.array([y - 1]), means, variances, log_prior
        )
        total += nll
        d_Qp, d_lamp = _natural_chain(d_means, d_vars, Qp, lamp)
        # known-known slots chain to the trainable class stats; every slot
        # born after Phase 1 (and the novel slot itself) chains to the prior
        g["class_q"] += d_Qp[:n_kk]
        g["class_lam"] += d_lamp[:n_kk]
        g["q0"] += d_Qp[n_kk:].sum(axis=0)
        g["lam0"] += float(d_lamp[n_kk:].sum())
        qry.dZ[j] += d_Z[0]
        for c in range(n):
            for i in contrib[c]:
                qry.dZ[i] += d_Qp[c] * inv
        g["b"] += _d_b_from_log_prior(d_log_prior, counts, params)

        if y == n + 1:
            Q = np.vstack([Q, q0[None, :] + z[0] * inv])
            lam = np.append(lam, lam0 + inv)
            counts = np.append(counts, novel_first_count)
            contrib.append([j])
        elif y <= n:
            counts[y - 1] += 1
            if y > n_kk:
                Q[y - 1] = Q[y - 1] + z[0] * inv
                lam[y - 1] += inv
                contrib[y - 1].append(j)
        else:
            raise ValueError(f"query {j}: label {y} skips ahead of the {n} known classes")

    scale = 1.0 / m
    qry.dZ *= scale
    for key in ("q0", "class_q", "class_lam"):
        g[key] = g[key] * scale
    g["lam0"] *= scale
    g["b"] *= scale
    return total * scale, g


def _merge_encoder_grads(tapes):
    live = [t for t in tapes if t.weight is not None]
    if not live:
        return None, None
    d_weight = sum(t.dZ.T @ t.H for t in live)
    d_bias = sum(t.dZ.sum(axis=0) for t in live)
    return d_weight, d_bias


def pretrain_grads(weight, bias, H, labels, means, log_variances, beta):
    """Supervised Gaussian-classifier loss and gradients.

    Loss = mean NLL of the true labels under a uniform-prior Gaussian
    classifier in embedding space, plus beta * sum_n d / s_n which pushes the
    learned variances up (trace of the inverse covariances).
    """
    H = np.asarray(H, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    means = np.asarray(means, dtype=np.float64)
    log_variances = np.asarray(log_variances, dtype=np.float64)
    variances = np.exp(log_variances)
    d = means.shape[1]

    Z = encode(weight, bias, H)
    log_prior = np.zeros(means.shape[0])
    nll, d_means, d_vars, d_Z, _ = _mixture_nll_grads(Z, labels - 1, means, variances, log_prior)
    reg = beta * float(np.sum(d / variances))
    d_log_vars = d_vars * variances - beta * d / variances

    if weight is None:
        d_weight, d_bias = None, None
    else:
        d_weight = d_Z.T @ H
        d_bias = d_Z.sum(axis=0)
    return nll + reg, d_weight, d_bias, d_means, d_log_vars


def loo_support_grads(H, labels, weight, bias, q0, lam0, *, params, noise_var, novel_first_count=2):
    """Leave-one-out support NLL and its gradient w.r.t. the affine layer.

    Each support point is scored against the state built from the remaining
    points; a held-out point whose class disappears from the reduced support
    becomes a novel-slot target. Only (weight, bias) receive gradients; the
    prior and CRP parameters are treated as constants here.
    """
    H = np.asarray(H, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    q0 = np.asarray(q0, dtype=np.float64)
    inv = 1.0 / noise_var
    Z = encode(weight, bias, H)
    dZ = np.zeros_like(Z)
    s = len(labels)
    total = 0.0

    for i in range(s):
        rest = np.arange(s) != i
        rest_labels = labels[rest]
        kept = np.unique(rest_labels)
        remap = {int(c): j + 1 for j, c in enumerate(kept)}
        n = len(kept)
        y_held = remap.get(int(labels[i]), n + 1)

        dense = np.array([remap[int(c)] for c in rest_labels])
        S, K = support_sums(Z[rest], dense, n)
        counts = K + (novel_first_count - 1)
        Q = np.vstack([q0[None, :] + S * inv, q0[None, :]])
        lam = np.append(lam0 + K * inv, lam0)
        log_prior = _log_prior_from_counts(counts, params)
        means = Q / lam[:, None]
        variances = 1.0 / lam + noise_var

        nll, d_means, d_vars, d_Zq, _ = _mixture_nll_grads(
            Z[i : i + 1], np.array([y_held - 1]), means, variances, log_prior
        )
        total += nll
        d_Q, _ = _natural_chain(d_means, d_vars, Q, lam)
        dZ[i] += d_Zq[0]
        rest_idx = np.flatnonzero(rest)
        for j, y in zip(rest_idx, dense):
            dZ[j] += d_Q[y - 1] * inv

    total /= s
    dZ /= s
    if weight is None:
        return total, None, None
    return total, dZ.T @ H, dZ.sum(axis=0)
