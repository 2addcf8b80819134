"""Kernel backend selection.

The compiled extension (`mmsbr.diffcore._speedups`) is used when it imported
cleanly and the arrays are f32/f64; otherwise calls fall back to the numpy
implementations in `kernels_py`. Set MMSBR_PURE_PYTHON=1 to force the
fallback. Both backends implement the same order-invariant reductions; they
agree to ~1 ulp (exact at small sizes), and each is bit-deterministic on its
own, which is what the reproducibility contract needs.
"""

import os

import numpy as np

from . import kernels_py

_speedups = None
if os.environ.get("MMSBR_PURE_PYTHON", "0") in ("", "0"):
    try:
        from . import _speedups  # type: ignore[no-redef]
    except ImportError:
        _speedups = None


def backend():
    """Name of the active backend: 'compiled' or 'python'."""
    return "python" if _speedups is None else "compiled"


def _compiled_ok(*arrays):
    return _speedups is not None and all(
        a.dtype in (np.float32, np.float64) for a in arrays
    )


def softmax_fwd(x, mask=None):
    if not _compiled_ok(x):
        return kernels_py.softmax_fwd(x, mask)
    shape = x.shape
    k = shape[-1]
    xr = np.ascontiguousarray(x, dtype=x.dtype).reshape(-1, k)
    if mask is None:
        mr = np.empty((0, 0), dtype=np.uint8)
    else:
        mr = np.broadcast_to(mask, shape).astype(np.uint8).reshape(-1, k)
        mr = np.ascontiguousarray(mr)
    out = np.empty_like(xr)
    scratch = np.empty(k, dtype=x.dtype)
    _speedups.softmax_fwd(xr, mr, out, scratch)
    return out.reshape(shape)


def softmax_bwd(g, y):
    if not _compiled_ok(g, y) or g.dtype != y.dtype:
        return kernels_py.softmax_bwd(g, y)
    shape = y.shape
    k = shape[-1]
    gr = np.ascontiguousarray(g).reshape(-1, k)
    yr = np.ascontiguousarray(y).reshape(-1, k)
    out = np.empty_like(yr)
    _speedups.softmax_bwd(gr, yr, out)
    return out.reshape(shape)


def layer_norm_fwd(x, gain, bias, eps):
    if not _compiled_ok(x) or gain.dtype != x.dtype or bias.dtype != x.dtype:
        return kernels_py.layer_norm_fwd(x, gain, bias, eps)
    shape = x.shape
    d = shape[-1]
    xr = np.ascontiguousarray(x).reshape(-1, d)
    y = np.empty_like(xr)
    xhat = np.empty_like(xr)
    inv = np.empty(xr.shape[0], dtype=x.dtype)
    _speedups.layer_norm_fwd(
        xr, np.ascontiguousarray(gain), np.ascontiguousarray(bias), float(eps), y, xhat, inv
    )
    cache = (xhat.reshape(shape), inv.reshape(shape[:-1] + (1,)))
    return y.reshape(shape), cache


def layer_norm_bwd(g, cache, gain):
    xhat, inv = cache
    if not _compiled_ok(g, xhat) or g.dtype != xhat.dtype or gain.dtype != g.dtype:
        return kernels_py.layer_norm_bwd(g, cache, gain)
    shape = g.shape
    d = shape[-1]
    gr = np.ascontiguousarray(g).reshape(-1, d)
    xh = np.ascontiguousarray(xhat).reshape(-1, d)
    iv = np.ascontiguousarray(inv).reshape(-1)
    dx = np.empty_like(gr)
    dgain = np.zeros(d, dtype=g.dtype)
    dbias = np.zeros(d, dtype=g.dtype)
    _speedups.layer_norm_bwd(gr, xh, iv, np.ascontiguousarray(gain), dx, dgain, dbias)
    return dx.reshape(shape), dgain, dbias


def attn_apply_fwd(w, v):
    if not _compiled_ok(w, v) or w.dtype != v.dtype:
        return kernels_py.attn_apply_fwd(w, v)
    q, k = w.shape[-2], w.shape[-1]
    c = v.shape[-1]
    wr = np.ascontiguousarray(w).reshape(-1, q, k)
    vr = np.ascontiguousarray(v).reshape(-1, k, c)
    out = np.empty((wr.shape[0], q, c), dtype=w.dtype)
    scratch = np.empty(k, dtype=w.dtype)
    _speedups.attn_apply_fwd(wr, vr, out, scratch)
    return out.reshape(w.shape[:-1] + (c,))
