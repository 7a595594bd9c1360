"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the policy/value network and the PPO losses need are
provided. Every op records a closure that pushes the output gradient back to
its inputs; :meth:`Tensor.backward` runs them in reverse topological order.
Inside ``with no_grad():`` ops skip recording, which is the fast path the
samplers use.
"""
from __future__ import annotations

import contextlib

import numpy as np

from .. import _kernels

MASK_SENTINEL = -1e9

_GRAD_ENABLED = True


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if self._backward is None:
            raise GraphError("backward() needs a tensor produced by a recorded forward pass")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
                if node._prev:
                    node.grad = None if not node.requires_grad else node.grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out._prev = tuple(parents)
        out._backward = lambda: backward(out.grad)
    return out


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)

    def back(g):
        if _tracks(a):
            a._accum(_unbroadcast(g, a.shape))
        if _tracks(b):
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accum(-g))


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)

    def back(g):
        if _tracks(a):
            a._accum(_unbroadcast(g * b.data, a.shape))
        if _tracks(b):
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: a._accum(g * c))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: a._accum(g * (out > 0)))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: a._accum(g * out_data))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: a._accum(2 * g * a.data))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: a._accum(g * inside))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    take_a = a.data <= b.data

    def back(g):
        if _tracks(a):
            a._accum(_unbroadcast(g * take_a, a.shape))
        if _tracks(b):
            b._accum(_unbroadcast(g * ~take_a, b.shape))

    return _make(np.where(take_a, a.data, b.data), (a, b), back)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    take_a = a.data >= b.data

    def back(g):
        if _tracks(a):
            a._accum(_unbroadcast(g * take_a, a.shape))
        if _tracks(b):
            b._accum(_unbroadcast(g * ~take_a, b.shape))

    return _make(np.where(take_a, a.data, b.data), (a, b), back)


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    cond = np.asarray(cond, dtype=bool)

    def back(g):
        if _tracks(a):
            a._accum(_unbroadcast(g * cond, a.shape))
        if _tracks(b):
            b._accum(_unbroadcast(g * ~cond, b.shape))

    return _make(np.where(cond, a.data, b.data), (a, b), back)


# ------------------------------------------------------------------ reductions / shape


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is None:
            a._accum(np.broadcast_to(g, shape))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), shape))

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(old)))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inv)))


def concat(parts, axis=-1) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if _tracks(p):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def gather_last(a: Tensor, idx) -> Tensor:
    """``out[i] = a[i, idx[i]]`` for a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        a._accum(full)

    return _make(a.data[rows, idx], (a,), back)


# ------------------------------------------------------------------ layers


def matmul(x: Tensor, w: Tensor) -> Tensor:
    def back(g):
        if _tracks(x):
            x._accum(g @ w.data.T)
        if _tracks(w):
            xs = x.data.reshape(-1, x.shape[-1])
            w._accum(xs.T @ g.reshape(-1, g.shape[-1]))

    return _make(x.data @ w.data, (x, w), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 3x3 convolution, channels-last. x: (B, H, W, C); w: (9*C, Cout); b: (Cout,)."""
    c = x.shape[-1]
    if w.shape[0] != c * 9:
        raise ShapeError(f"conv weight expects {w.shape[0] // 9} input channels, got {c}")
    cols = _kernels.im2col3(x.data)  # (B, H, W, 9*C)
    out = cols @ w.data + b.data  # (B, H, W, Cout)

    def back(g):
        cout = g.shape[-1]
        if _tracks(w):
            w._accum(cols.reshape(-1, c * 9).T @ g.reshape(-1, cout))
        if _tracks(b):
            b._accum(g.reshape(-1, cout).sum(axis=0))
        if _tracks(x):
            x._accum(_kernels.col2im3(g @ w.data.T, c))

    return _make(out, (x, w, b), back)


def _bins(n: int, k: int):
    return [(i * n // k, -(-(i + 1) * n // k)) for i in range(k)]


def adaptive_avgpool(x: Tensor, grid) -> Tensor:
    """Average (B, H, W, C) into a (B, gh, gw, C) grid of possibly overlapping bins."""
    bsz, h, w, c = x.shape
    gh, gw = grid
    rb, cb = _bins(h, gh), _bins(w, gw)
    out = np.empty((bsz, gh, gw, c), dtype=x.data.dtype)
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            out[:, i, j, :] = x.data[:, r0:r1, c0:c1, :].mean(axis=(1, 2))

    def back(g):
        dx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                n = (r1 - r0) * (c1 - c0)
                dx[:, r0:r1, c0:c1, :] += (g[:, i, j, :] / n)[:, None, None, :]
        x._accum(dx)

    return _make(out, (x,), back)


def masked_maxpool(x: Tensor, present) -> Tensor:
    """Max over the entity axis of (B, N, F), ignoring absent slots (all absent -> 0)."""
    present = np.asarray(present, dtype=bool)
    filled = np.where(present[:, :, None], x.data, -np.inf)
    arg = np.argmax(filled, axis=1)  # (B, F)
    any_present = present.any(axis=1)
    bidx = np.arange(x.shape[0])[:, None]
    fidx = np.arange(x.shape[2])[None, :]
    out = np.where(any_present[:, None], x.data[bidx, arg, fidx], 0).astype(x.data.dtype)

    def back(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (bidx, arg, fidx), g * any_present[:, None])
        x._accum(dx)

    return _make(out, (x,), back)


def masked_log_softmax(logits: Tensor, mask) -> Tensor:
    """Log-softmax over the last axis with illegal entries pinned to the sentinel.

    Masked entries get probability exactly 0 and receive zero gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every row of the mask needs at least one legal entry")
    z = np.where(mask, logits.data, MASK_SENTINEL)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    e = np.where(mask, e, 0)
    s = e.sum(axis=-1, keepdims=True)
    out = np.where(mask, z - zmax - np.log(s), MASK_SENTINEL).astype(logits.data.dtype)
    probs = e / s

    def back(g):
        gm = np.where(mask, g, 0)
        d = gm - probs * gm.sum(axis=-1, keepdims=True)
        logits._accum(np.where(mask, d, 0))

    return _make(out, (logits,), back)


def softmax_entropy(logp: Tensor, mask) -> Tensor:
    """Entropy per row, -sum p log p, over legal entries of a masked log-softmax."""
    mask = np.asarray(mask, dtype=bool)
    safe = where(mask, logp, _lift(np.zeros_like(logp.data)))
    p = exp(safe)
    p = where(mask, p, _lift(np.zeros_like(logp.data)))
    return neg(sum_(mul(p, safe), axis=-1))
