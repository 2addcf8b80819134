# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused kernels: masked softmax, layer norm, attention apply.

Same contracts as mmsbr.diffcore.kernels_py. Sequence-axis reductions sort
their addends first, so results are invariant to row permutations.
"""

from libc.math cimport exp, sqrt, INFINITY

ctypedef fused real:
    float
    double


cdef inline void _isort(real* a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef real key
    for i in range(1, n):
        key = a[i]
        j = i - 1
        while j >= 0 and a[j] > key:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = key


def softmax_fwd(real[:, ::1] x, unsigned char[:, ::1] mask,
                real[:, ::1] out, real[::1] scratch):
    cdef Py_ssize_t rows = x.shape[0], k = x.shape[1]
    cdef bint has_mask = mask.shape[0] == rows
    cdef Py_ssize_t r, j
    cdef real m, s
    cdef bint bad
    with nogil:
        for r in range(rows):
            m = -INFINITY
            bad = False
            for j in range(k):
                if not has_mask or mask[r, j]:
                    if x[r, j] != x[r, j]:
                        bad = True  # NaN propagates, matching the numpy path
                    elif x[r, j] > m:
                        m = x[r, j]
            if bad:
                for j in range(k):
                    out[r, j] = <real>(0.0) / <real>(0.0)
                continue
            if m == -INFINITY:
                for j in range(k):
                    out[r, j] = 0
                continue
            for j in range(k):
                if not has_mask or mask[r, j]:
                    scratch[j] = exp(x[r, j] - m)
                else:
                    scratch[j] = 0
                out[r, j] = scratch[j]
            _isort(&scratch[0], k)
            s = 0
            for j in range(k):
                s += scratch[j]
            if s == 0:
                s = 1
            for j in range(k):
                out[r, j] /= s


def softmax_bwd(real[:, ::1] g, real[:, ::1] y, real[:, ::1] out):
    cdef Py_ssize_t rows = g.shape[0], k = g.shape[1]
    cdef Py_ssize_t r, j
    cdef real dot
    with nogil:
        for r in range(rows):
            dot = 0
            for j in range(k):
                dot += g[r, j] * y[r, j]
            for j in range(k):
                out[r, j] = (g[r, j] - dot) * y[r, j]


def layer_norm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps,
                   real[:, ::1] y, real[:, ::1] xhat, real[::1] inv):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t r, j
    cdef real mu, var, iv, xc
    with nogil:
        for r in range(rows):
            mu = 0
            for j in range(d):
                mu += x[r, j]
            mu /= d
            var = 0
            for j in range(d):
                xc = x[r, j] - mu
                var += xc * xc
            var /= d
            iv = <real>(1.0) / <real>sqrt(var + <real>eps)
            inv[r] = iv
            for j in range(d):
                xhat[r, j] = (x[r, j] - mu) * iv
                y[r, j] = xhat[r, j] * gain[j] + bias[j]


def layer_norm_bwd(real[:, ::1] g, real[:, ::1] xhat, real[::1] inv,
                   real[::1] gain, real[:, ::1] dx, real[::1] dgain,
                   real[::1] dbias):
    cdef Py_ssize_t rows = g.shape[0], d = g.shape[1]
    cdef Py_ssize_t r, j
    cdef real m1, m2, dxh
    with nogil:
        for r in range(rows):
            m1 = 0
            m2 = 0
            for j in range(d):
                dxh = g[r, j] * gain[j]
                dx[r, j] = dxh          # stash dxhat
                m1 += dxh
                m2 += dxh * xhat[r, j]
                dgain[j] += g[r, j] * xhat[r, j]
                dbias[j] += g[r, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[r, j] = (dx[r, j] - m1 - xhat[r, j] * m2) * inv[r]


def attn_apply_fwd(real[:, :, ::1] w, real[:, :, ::1] v,
                   real[:, :, ::1] out, real[::1] scratch):
    cdef Py_ssize_t b = w.shape[0], q = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t c = v.shape[2]
    cdef Py_ssize_t bi, i, j, ci
    cdef real s
    with nogil:
        for bi in range(b):
            for i in range(q):
                for ci in range(c):
                    for j in range(k):
                        scratch[j] = w[bi, i, j] * v[bi, j, ci]
                    _isort(&scratch[0], k)
                    s = 0
                    for j in range(k):
                        s += scratch[j]
                    out[bi, i, ci] = s
