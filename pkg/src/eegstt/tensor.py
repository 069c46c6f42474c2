"""Minimal dense tensors with define-by-run reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :func:`backward` replays that record in reverse. Outside a tape the same
operations run as plain numpy arithmetic with no bookkeeping, which is what
inference and finite-difference evaluation use.

Arrays may carry leading batch dimensions. The only broadcasting allowed is a
right-hand operand whose shape is a trailing suffix of the left operand's
(bias rows, positional tables, weight matrices shared across a batch).
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_FLOATS = (np.float32, np.float64)
_state = threading.local()


class Tensor:
    """Immutable array plus a flag saying whether gradients flow into it."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.type in _FLOATS:
                dtype = data.dtype
            else:
                dtype = np.float32
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr, requires_grad):
        # op outputs are fresh arrays; skip the defensive copy
        t = object.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest per thread and are never shared
    between threads, so independent tapes can run concurrently.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in output")


def _emit(data, op, parents, backward_fn, check=True):
    """Wrap an op result and record it on the active tape when needed."""
    if check:
        _check_finite(data, op)
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(np.ascontiguousarray(data), needs)
    if needs:
        tape.nodes.append(_Node(out, parents, backward_fn))
    return out


def _sum_to(grad, shape):
    """Reduce a broadcast gradient back to a trailing-suffix operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_suffix(a, b, op):
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"{op}: shape {b.shape} does not match {a.shape}")


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    """Elementwise sum; ``b`` may be a trailing suffix of ``a`` (bias add)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "add")
    bshape = b.shape

    def back(g):
        return g, _sum_to(g, bshape)

    return _emit(a.data + b.data, "add", (a, b), back)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "sub")
    bshape = b.shape

    def back(g):
        return g, -_sum_to(g, bshape)

    return _emit(a.data - b.data, "sub", (a, b), back)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return g * bd, _sum_to(g * ad, bd.shape)

    return _emit(ad * bd, "mul", (a, b), back)


def scale(a, c):
    """Multiply by a python scalar."""
    c = float(c)

    def back(g):
        return (g * c,)

    return _emit(a.data * c, "scale", (a,), back)


def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared by every batch entry of ``a`` or has
    exactly the same leading batch shape.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch shapes differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if bd.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _emit(ad @ bd, "matmul", (a, b), back)


def reshape(a, shape):
    old = a.shape

    def back(g):
        return (g.reshape(old),)

    return _emit(a.data.reshape(shape), "reshape", (a,), back, check=False)


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inverse),)

    return _emit(np.transpose(a.data, axes), "transpose", (a,), back, check=False)


def swap_last(a):
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def sum_all(a):
    shape = a.shape

    def back(g):
        return (np.broadcast_to(g, shape).astype(g.dtype),)

    return _emit(np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,), back)


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.data.size)


def log(a):
    ad = a.data
    if np.any(ad <= 0):
        raise NumericError("log: non-positive input")

    def back(g):
        return (g / ad,)

    return _emit(np.log(ad), "log", (a,), back)


def clamp_min(a, floor):
    ad = a.data
    keep = ad >= floor

    def back(g):
        return (g * keep,)

    return _emit(np.maximum(ad, np.asarray(floor, dtype=ad.dtype)), "clamp_min", (a,), back)


def pick(a, index):
    """Select one entry per row along the last axis: ``out[n] = a[n, index[n]]``."""
    index = np.asarray(index, dtype=np.int64)
    ad = a.data
    if ad.ndim != 2 or index.shape != (ad.shape[0],):
        raise ShapeError(f"pick: expected (N, K) and (N,), got {ad.shape} and {index.shape}")
    if np.any(index < 0) or np.any(index >= ad.shape[1]):
        raise ShapeError("pick: index out of range")
    rows = np.arange(ad.shape[0])

    def back(g):
        full = np.zeros_like(ad)
        full[rows, index] = g
        return (full,)

    return _emit(ad[rows, index], "pick", (a,), back)


# ---------------------------------------------------------------- layers

def softmax_rows(x):
    """Softmax along the last axis with row-max subtraction."""
    xd = x.data
    if np.any(np.isnan(xd)):
        raise NumericError("softmax_rows: NaN input")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, "softmax_rows", (x,), back)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply elementwise gain and bias."""
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _sum_to(g * xhat, (n,)), _sum_to(g, (n,))

    return _emit(xhat * gd + bias.data, "layer_norm", (x, gain, bias), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU with the tanh approximation of the normal CDF."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(u)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _emit(0.5 * xd * (1.0 + t), "gelu", (x,), back)


def masked_scale_scores(scores, mask):
    """Exclude positions where ``mask`` is 0 from a following softmax.

    Excluded scores are replaced by the most negative finite value of the
    dtype, so their softmax weight underflows to exactly zero.
    """
    m = np.asarray(mask)
    if not ((m == 0) | (m == 1)).all():
        raise ConfigError("mask entries must be 0 or 1")
    m = m.astype(bool)
    if scores.shape[-2:] != m.shape:
        raise ShapeError(f"mask shape {m.shape} does not match scores {scores.shape}")
    if not m.any(axis=-1).all():
        raise ConfigError("mask has a row with no allowed position")
    sd = scores.data
    out = np.where(m, sd, np.finfo(sd.dtype).min).astype(sd.dtype)

    def back(g):
        return (g * m,)

    return _emit(out, "masked_scale_scores", (scores,), back)


# ---------------------------------------------------------------- backward

def backward(loss, tape, params=None):
    """Reverse-mode pass over ``tape`` starting from scalar ``loss``.

    Returns a dict mapping each leaf tensor that received gradient to its
    gradient array. When ``params`` is given, returns a list aligned with it
    instead, with zeros for parameters the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    owners = {id(loss): loss}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=p.dtype).reshape(p.shape)
                owners[key] = p
    if id(loss) in grads and id(loss) not in produced and not loss.requires_grad:
        raise ConfigError("backward: loss was not produced on this tape")
    leaves = {owners[k]: g for k, g in grads.items() if k not in produced and owners[k].requires_grad}
    for g in leaves.values():
        _check_finite(g, "backward")
    if params is None:
        return leaves
    return [leaves.get(p, np.zeros_like(p.data)) for p in params]
