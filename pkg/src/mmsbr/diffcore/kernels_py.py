"""Numpy reference implementations of the fused hot kernels.

These are the fallback backend; `mmsbr.diffcore._speedups` provides compiled
equivalents with the same signatures. All reductions that run along a
sequence axis (softmax denominators, attention weighted sums) accumulate
their addends in sorted value order, which makes the results independent of
the input row order: permuting transformer rows permutes outputs bitwise.
"""

import numpy as np


def softmax_fwd(x, mask=None):
    """Row softmax over the last axis.

    mask, when given, is boolean with True marking valid positions; invalid
    positions get weight exactly 0. Rows with no valid position yield zeros.
    exp runs on value-sorted rows and scatters back: numpy's vectorized exp
    can round differently in SIMD lanes vs the scalar tail, so evaluating at
    canonical positions keeps the result independent of the row order.
    """
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = x - m
    order = np.argsort(shifted, axis=-1)
    e_sorted = np.exp(np.take_along_axis(shifted, order, axis=-1))
    denom = np.sum(e_sorted, axis=-1, keepdims=True)
    denom = np.where(denom == 0.0, 1.0, denom)
    e = np.empty_like(e_sorted)
    np.put_along_axis(e, order, e_sorted, axis=-1)
    return e / denom


def softmax_bwd(g, y):
    dot = np.sum(g * y, axis=-1, keepdims=True)
    return (g - dot) * y


def layer_norm_fwd(x, gain, bias, eps):
    """Normalize over the last axis, then affine. Returns (y, cache)."""
    d = x.shape[-1]
    mu = np.sum(x, axis=-1, keepdims=True) / d
    xc = x - mu
    var = np.sum(xc * xc, axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain + bias
    return y, (xhat, inv)


def layer_norm_bwd(g, cache, gain):
    xhat, inv = cache
    d = xhat.shape[-1]
    lead = tuple(range(g.ndim - 1))
    dgain = np.sum(g * xhat, axis=lead)
    dbias = np.sum(g, axis=lead)
    dxhat = g * gain
    m1 = np.sum(dxhat, axis=-1, keepdims=True) / d
    m2 = np.sum(dxhat * xhat, axis=-1, keepdims=True) / d
    dx = (dxhat - m1 - xhat * m2) * inv
    return dx, dgain, dbias


def attn_apply_fwd(w, v):
    """out[..., i, c] = sum_j w[..., i, j] * v[..., j, c].

    The sum over j runs in sorted value order so the contraction is
    invariant to permutations of the j axis.
    """
    prod = w[..., :, :, None] * v[..., None, :, :]
    prod = np.sort(prod, axis=-2)
    return np.sum(prod, axis=-2)
