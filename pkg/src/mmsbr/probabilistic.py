"""Probabilistic branch: price as a diagonal Gaussian plus attention in
Wasserstein geometry.

A price level and its category index two lookup tables; the covariance side
passes through pos(x) = elu(x) + 1 + eps after the category addition, so
every emitted covariance vector is strictly positive. Relevance between
positions is the closed-form 2-Wasserstein distance between diagonal
Gaussians, turned into attention weights by a softmax over negative
distances (nearer prices attend more); output covariances use the squared
weights, keeping outputs Gaussian.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc

POS_EPS = 1e-6


def pos(x):
    """Strictly positive map for covariance vectors."""
    return dc.elu1p(x, POS_EPS)


def price_embed(levels, categories, params):
    """Gaussian price embedding for integer level/category arrays.

    mean = mu_table[level] + cat; cov = pos(sigma_table[level] + cat), the
    positivity map applied after the category addition.
    Returns (mu, sigma) with shape levels.shape + (d,).
    """
    levels = np.asarray(levels, dtype=int)
    categories = np.asarray(categories, dtype=int)
    rho = params["prob.mu_table"].shape[0]
    ncat = params["prob.cat_table"].shape[0]
    if levels.size and (levels.min() < 0 or levels.max() >= rho):
        raise IndexError(f"price level outside [0, {rho - 1}]")
    if categories.size and (categories.min() < 0 or categories.max() >= ncat):
        raise IndexError(f"category outside [0, {ncat - 1}]")
    cat = dc.gather_rows(params["prob.cat_table"], categories)
    mu = dc.add(dc.gather_rows(params["prob.mu_table"], levels), cat)
    sigma = pos(dc.add(dc.gather_rows(params["prob.sigma_table"], levels), cat))
    return mu, sigma


def w2_distance(mu1, sigma1, mu2, sigma2):
    """Closed-form 2-Wasserstein distance between diagonal Gaussians,
    rowwise over the last axis:
    sqrt(|mu1 - mu2|^2 + |sqrt(sigma1) - sqrt(sigma2)|^2)."""
    dm = dc.add(mu1, dc.scale(mu2, -1.0))
    ds = dc.add(dc.sqrt(sigma1), dc.scale(dc.sqrt(sigma2), -1.0))
    inner = dc.add(dc.sum_(dc.square(dm), axis=-1), dc.sum_(dc.square(ds), axis=-1))
    return dc.sqrt(inner)


def pairwise_w2(mu_a, sigma_a, mu_b, sigma_b):
    """W2 between every row of a (…, p, d) Gaussian set and every row of a
    (…, q, d) set, via the norm expansion (no p x q x d temporary):
    |x - y|^2 = |x|^2 + |y|^2 - 2 x.y applied to means and covariance roots.
    """
    ra = dc.sqrt(sigma_a)
    rb = dc.sqrt(sigma_b)
    p = mu_a.shape[-2]
    q = mu_b.shape[-2]
    lead = mu_a.shape[:-2]

    def sq_norms(t):
        return dc.sum_(dc.square(t), axis=-1, keepdims=True)  # (…, k, 1)

    def outer(x, y):
        return dc.matmul(x, dc.transpose(y))  # (…, p, q)

    na = dc.broadcast_to(sq_norms(mu_a), lead + (p, q))
    nb = dc.broadcast_to(dc.transpose(sq_norms(mu_b)), lead + (p, q))
    mu_term = dc.add(dc.add(na, nb), dc.scale(outer(mu_a, mu_b), -2.0))

    sa = dc.broadcast_to(sq_norms(ra), lead + (p, q))
    sb = dc.broadcast_to(dc.transpose(sq_norms(rb)), lead + (p, q))
    sig_term = dc.add(dc.add(sa, sb), dc.scale(outer(ra, rb), -2.0))

    return dc.sqrt(dc.add(mu_term, sig_term))


def wasserstein_self_attention(mu, sigma, mask, params, literal=False, return_weights=False):
    """Attention over a Gaussian price sequence.

    mu/sigma: (B, m, d); mask: (B, m) bool, True = real position. Query,
    key and value Gaussians come from per-role linear maps (pos applied to
    the covariance side); weights are softmax_j(-W2(q_i, k_j)) over valid
    keys. Output means use the weights, output covariances the squared
    weights. ``literal`` uses the raw distances (and squared distances)
    unnormalized instead of the softmax.
    """
    mask = np.asarray(mask, dtype=bool)

    def role(prefix):
        rmu = dc.matmul(mu, params[f"{prefix}.mu"])
        rsig = pos(dc.matmul(sigma, params[f"{prefix}.sigma"]))
        return rmu, rsig

    qmu, qsig = role("prob.wsa.Q")
    kmu, ksig = role("prob.wsa.K")
    vmu, vsig = role("prob.wsa.V")

    dist = pairwise_w2(qmu, qsig, kmu, ksig)  # (B, m, m)
    key_mask = np.broadcast_to(mask[:, None, :], dist.shape)
    if literal:
        w = dc.masked_fill(dist, ~key_mask, 0.0)
    else:
        w = dc.softmax(dc.scale(dist, -1.0), mask=key_mask)
    h_mu = dc.attn_apply(w, vmu)
    h_sigma = dc.attn_apply(dc.square(w), vsig)
    if return_weights:
        return h_mu, h_sigma, w
    return h_mu, h_sigma


def user_price_range(h_mu, h_sigma, lengths):
    """Acceptable price range: the output at the last real position of each
    sequence. lengths: (B,) counts of non-padded positions."""
    lengths = np.asarray(lengths, dtype=int)
    if lengths.size == 0 or lengths.min() < 1:
        raise ValueError("every sequence needs at least one real position")
    b, m, d = h_mu.shape
    idx = np.broadcast_to((lengths - 1)[:, None], (b, d)).copy()
    last_mu = dc.gather_positions(dc.transpose(h_mu, (0, 2, 1)), idx)
    last_sigma = dc.gather_positions(dc.transpose(h_sigma, (0, 2, 1)), idx)
    return last_mu, last_sigma
