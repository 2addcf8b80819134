"""Dense tensors with a recorded computation graph and reverse-mode gradients.

A `Tape` collects one `Node` per recorded operation; nodes are appended in
execution order, so inputs always precede their consumers and walking the
node list backwards is a valid reverse topological order. Recording happens
only while a tape is active (``with Tape() as tape``) and only for ops whose
inputs require gradients; outside a tape every op is a plain numpy forward.

Broadcasting is deliberately narrow: elementwise `add` accepts equal shapes,
a scalar, or a trailing row vector; everything else must go through an
explicit `broadcast_to`. `matmul` follows numpy's stacked-matrix semantics
(a shared 2-D weight broadcasts over leading batch axes).
"""

from __future__ import annotations

import os
import threading

import numpy as np

from . import kernels as K

SQRT_GUARD_EPS = 1e-12
_DEBUG_FINITE = os.environ.get("MMSBR_DEBUG_FINITE", "0") not in ("", "0")

_tls = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class Tensor:
    """A dense real array plus gradient-tracking metadata."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Small amount of sugar; model code mostly calls the op functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -other)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    __slots__ = ("op", "outputs", "inputs", "bwd")

    def __init__(self, op, outputs, inputs, bwd):
        self.op = op
        self.outputs = outputs
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Append-only record of ops; single-threaded while recording."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_tls, "tapes", None)
        if stack is None:
            stack = _tls.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tapes.pop()
        return False


def active_tape():
    stack = getattr(_tls, "tapes", None)
    return stack[-1] if stack else None


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def _check_finite(op, arr):
    if _DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _record(op, out_data, inputs, bwd):
    _check_finite(op, out_data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, (out,), inputs, bwd))
    return out


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape an operand was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(tape, loss):
    """Accumulate gradients of a scalar loss over the tape.

    Returns a dict mapping each reached leaf tensor (requires_grad inputs
    that are not op outputs) to its gradient array. Parameters the loss does
    not reach are simply absent; callers fill in zeros.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {loss: np.ones((), dtype=loss.dtype)}
    produced = set()
    for node in tape.nodes:
        for out in node.outputs:
            produced.add(id(out))
    for node in reversed(tape.nodes):
        gouts = [grads.pop(out, None) for out in node.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [
            g if g is not None else np.zeros(out.shape, dtype=out.dtype)
            for g, out in zip(gouts, node.outputs)
        ]
        gins = node.bwd(*gouts)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if t in grads:
                grads[t] = grads[t] + g
            else:
                grads[t] = g
    return {t: g for t, g in grads.items() if id(t) not in produced and t.requires_grad}


# ---------------------------------------------------------------------------
# op catalog
# ---------------------------------------------------------------------------


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    y = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", y, (a, b), bwd)


def add(a, b):
    if not isinstance(b, Tensor):
        y = a.data + np.asarray(b, dtype=a.dtype)
        return _record("add", y, (a,), lambda g: (g,))
    ok = (
        a.shape == b.shape
        or b.shape == ()
        or a.shape == ()
        or (b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1])
        or (a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1])
    )
    if not ok:
        raise ShapeError(
            f"add allows equal shapes, scalars or a trailing row vector; got {a.shape} + {b.shape}"
        )
    y = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", y, (a, b), bwd)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul is elementwise on equal shapes, got {a.shape} * {b.shape}")
    y = a.data * b.data

    def bwd(g):
        return g * b.data, g * a.data

    return _record("mul", y, (a, b), bwd)


def scale(a, s):
    s = float(s)
    y = a.data * np.asarray(s, dtype=a.dtype)

    def bwd(g):
        return (g * np.asarray(s, dtype=g.dtype),)

    return _record("scale", y, (a,), bwd)


def concat(tensors, axis):
    tensors = tuple(tensors)
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record("concat", y, tensors, bwd)


def split(a, sizes, axis):
    """Split along `axis` into len(sizes) tensors; sizes must sum to the extent."""
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover extent {a.shape[axis]}")
    offsets = np.cumsum(sizes)[:-1]
    pieces = np.split(a.data, offsets, axis=axis)
    outs = tuple(Tensor(p) for p in pieces)
    for o in pieces:
        _check_finite("split", o)
    tape = active_tape()
    if tape is not None and a.requires_grad:
        for o in outs:
            o.requires_grad = True

        def bwd(*gouts):
            return (np.concatenate(gouts, axis=axis),)

        tape.nodes.append(Node("split", outs, (a,), bwd))
    return outs


def reshape(a, shape):
    y = a.data.reshape(shape)
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record("reshape", y, (a,), bwd)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    y = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", y, (a,), bwd)


def broadcast_to(a, shape):
    y = np.broadcast_to(a.data, shape).copy()
    orig = a.shape

    def bwd(g):
        return (_unbroadcast(g, orig),)

    return _record("broadcast_to", y, (a,), bwd)


def sum_(a, axis=None, keepdims=False):
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record("sum", y, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.shape[axis]
    y = a.data.sum(axis=axis, keepdims=keepdims) / count

    def bwd(g):
        if axis is None:
            gg = g / count
            return (np.broadcast_to(gg, a.shape).copy(),)
        gg = g / count
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record("mean", y, (a,), bwd)


def softmax(a, mask=None):
    """Softmax over the last axis; `mask` (True = valid) excludes positions."""
    y = K.softmax_fwd(a.data, mask)

    def bwd(g):
        return (K.softmax_bwd(g, y),)

    return _record("softmax", y, (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {a.shape[-1]}"
        )
    y, cache = K.layer_norm_fwd(a.data, gain.data, bias.data, eps)

    def bwd(g):
        dx, dgain, dbias = K.layer_norm_bwd(g, cache, gain.data)
        return dx, dgain, dbias

    return _record("layer_norm", y, (a, gain, bias), bwd)


def relu(a):
    y = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _record("relu", y, (a,), bwd)


def sigmoid(a):
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record("sigmoid", y, (a,), bwd)


def elu(a):
    y = np.where(a.data > 0, a.data, np.expm1(a.data))

    def bwd(g):
        return (g * np.where(a.data > 0, 1.0, y + 1.0),)

    return _record("elu", y, (a,), bwd)


def elu1p(a, eps=1e-6):
    """Positivity map elu(x) + 1 + eps; strictly positive for all finite x."""
    e = np.where(a.data > 0, a.data, np.expm1(a.data))
    y = e + (1.0 + eps)

    def bwd(g):
        return (g * np.where(a.data > 0, 1.0, e + 1.0),)

    return _record("elu1p", y, (a,), bwd)


def sqrt(a):
    """Guarded square root: negative rounding residue clamps to 0, and the
    gradient denominator clamps at SQRT_GUARD_EPS so 0 stays finite."""
    y = np.sqrt(np.maximum(a.data, 0.0))

    def bwd(g):
        return (g * 0.5 / np.sqrt(np.maximum(a.data, SQRT_GUARD_EPS)),)

    return _record("sqrt", y, (a,), bwd)


def square(a):
    y = a.data * a.data

    def bwd(g):
        return (2.0 * a.data * g,)

    return _record("square", y, (a,), bwd)


def log(a):
    y = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _record("log", y, (a,), bwd)


def clamp_min(a, floor):
    y = np.maximum(a.data, floor)

    def bwd(g):
        return (g * (a.data >= floor),)

    return _record("clamp_min", y, (a,), bwd)


def masked_fill(a, mask, value):
    """Replace positions where `mask` is True by `value` (no grad through them)."""
    mask = np.broadcast_to(mask, a.shape)
    y = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def bwd(g):
        return (np.where(mask, 0.0, g),)

    return _record("masked_fill", y, (a,), bwd)


def normalize_rows(a, eps=1e-12):
    """Scale each row (last axis) to unit L2 norm; zero rows stay finite."""
    n = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    n = np.maximum(n, eps)
    y = a.data / n

    def bwd(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((g - y * dot) / n,)

    return _record("normalize_rows", y, (a,), bwd)


def cosine_similarity(a, b):
    """Rowwise cosine over the last axis (composite of primitives)."""
    return sum_(mul(normalize_rows(a), normalize_rows(b)), axis=-1)


def gather_rows(table, idx):
    """Index the first axis of `table` with an integer array; output shape
    idx.shape + table.shape[1:]. Backward scatter-adds."""
    idx = np.asarray(idx)
    y = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("gather_rows", y, (table,), bwd)


def gather_positions(a, idx):
    """Pick one entry per row along the last axis: out[...] = a[..., idx[...]]."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather_positions index shape {idx.shape} != {a.shape[:-1]}")
    y = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gt = np.zeros_like(a.data)
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        return (gt,)

    return _record("gather_positions", y, (a,), bwd)


def attn_apply(w, v):
    """Weights-times-values contraction with an order-invariant sum over the
    key axis: out[..., i, :] = sum_j w[..., i, j] * v[..., j, :]."""
    if w.shape[:-2] != v.shape[:-2] or w.shape[-1] != v.shape[-2]:
        raise ShapeError(f"attn_apply shapes incompatible: {w.shape} x {v.shape}")
    y = K.attn_apply_fwd(w.data, v.data)

    def bwd(g):
        gw = g @ np.swapaxes(v.data, -1, -2)
        gv = np.swapaxes(w.data, -1, -2) @ g
        return gw, gv

    return _record("attn_apply", y, (w, v), bwd)


def stack(tensors, axis):
    """Stack equal-shape tensors along a new axis (composite)."""
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)
