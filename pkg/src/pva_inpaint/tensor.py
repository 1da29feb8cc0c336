"""Minimal dense tensor library with tape-based reverse-mode autodiff.

Everything is float64 and CPU-only. The op set is deliberately small:
matmul, elementwise arithmetic, softmax, layer norm, reductions, concat,
slicing, embedding lookup -- enough for attention networks and their
training loops, nothing more.
"""

from __future__ import annotations

import math
import struct

import numpy as np

_MAGIC = b"PVAT"
_VERSION = 1


class TensorError(Exception):
    """Raised on shape mismatches, non-finite values, or misuse of the tape."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suspends tape recording (e.g. during sampling)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _check_finite(arr):
    # summing is ~10x cheaper than isfinite().all() and catches any NaN/Inf;
    # a non-finite sum of finite values only happens near the float64 max,
    # so the exact check runs just on that rare path
    if not math.isfinite(float(np.sum(arr))):
        if np.isfinite(arr).all():
            return
        raise TensorError("non-finite values produced")


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array plus an optional gradient and tape linkage.

    The tape is implicit: each op result remembers its parents and a
    closure that routes the incoming gradient to them. backward() on a
    scalar walks that graph once in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward_fn):
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr)
        out.data = arr
        out.grad = None
        if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise TensorError("backward requires a scalar loss")
        if not self.requires_grad:
            raise TensorError("loss is not connected to any tape")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g

    # -- elementwise arithmetic ----------------------------------------------

    @staticmethod
    def _coerce(x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def __add__(self, other):
        a = self
        if isinstance(other, (int, float)):
            return Tensor._from_op(a.data + other, (a,), lambda g: ((a, g),))
        b = Tensor._coerce(other)
        return Tensor._from_op(
            a.data + b.data, (a, b),
            lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))

    __radd__ = __add__

    def __sub__(self, other):
        a = self
        if isinstance(other, (int, float)):
            return Tensor._from_op(a.data - other, (a,), lambda g: ((a, g),))
        b = Tensor._coerce(other)
        return Tensor._from_op(
            a.data - b.data, (a, b),
            lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))))

    def __rsub__(self, other):
        return Tensor._coerce(other) - self

    def __mul__(self, other):
        a = self
        if isinstance(other, (int, float)):
            return Tensor._from_op(a.data * other, (a,), lambda g: ((a, g * other),))
        b = Tensor._coerce(other)
        return Tensor._from_op(
            a.data * b.data, (a, b),
            lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                       (b, _unbroadcast(g * a.data, b.shape))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other
        return Tensor._from_op(
            a.data / b.data, (a, b),
            lambda g: ((a, _unbroadcast(g / b.data, a.shape)),
                       (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))))

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __neg__(self):
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: ((a, -g),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape
        return Tensor._from_op(
            a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(old)),))

    def transpose(self, *axes):
        a = self
        if not axes:
            axes = tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return Tensor._from_op(
            a.data.transpose(axes), (a,), lambda g: ((a, g.transpose(inv)),))

    def swapaxes(self, i, j):
        a = self
        return Tensor._from_op(
            a.data.swapaxes(i, j), (a,), lambda g: ((a, g.swapaxes(i, j)),))

    def __getitem__(self, key):
        a = self
        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            return ((a, full),)
        return Tensor._from_op(a.data[key], (a,), bwd)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        def bwd(g):
            if axis is None:
                return ((a, np.broadcast_to(g, a.shape).copy()),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return ((a, np.broadcast_to(gg, a.shape).copy()),)
        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)

    def mean(self, axis=None, keepdims=False):
        a = self
        n = a.size if axis is None else a.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a, b):
    """Matrix product with numpy-style batching over leading dimensions."""
    a = Tensor._coerce(a)
    b = Tensor._coerce(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise TensorError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    def bwd(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))
    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), bwd)


def exp(x):
    x = Tensor._coerce(x)
    out_data = np.exp(x.data)
    return Tensor._from_op(out_data, (x,), lambda g: ((x, g * out_data),))


def log(x):
    x = Tensor._coerce(x)
    return Tensor._from_op(np.log(x.data), (x,), lambda g: ((x, g / x.data),))


def sqrt(x):
    x = Tensor._coerce(x)
    out_data = np.sqrt(x.data)
    return Tensor._from_op(out_data, (x,), lambda g: ((x, g * 0.5 / out_data),))


def tanh(x):
    x = Tensor._coerce(x)
    out_data = np.tanh(x.data)
    return Tensor._from_op(out_data, (x,), lambda g: ((x, g * (1.0 - out_data ** 2)),))


def sigmoid(x):
    x = Tensor._coerce(x)
    out_data = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor._from_op(out_data, (x,),
                           lambda g: ((x, g * out_data * (1.0 - out_data)),))


_GELU_B = 1.702


def gelu(x):
    """Smooth gating activation x * sigmoid(1.702 x) (the one-exp gelu
    approximation) with its exact analytic derivative."""
    x = Tensor._coerce(x)
    d = x.data
    s = 1.0 / (1.0 + np.exp(-_GELU_B * d))
    out_data = d * s
    def bwd(g):
        return ((x, g * (s * (1.0 + _GELU_B * d * (1.0 - s)))),)
    return Tensor._from_op(out_data, (x,), bwd)


def softmax_lastdim(x):
    """Numerically stable softmax along the last dimension."""
    x = Tensor._coerce(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return ((x, out_data * (g - dot)),)
    return Tensor._from_op(out_data, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last dimension to zero mean / unit variance, then
    apply a learned gain and bias. Fused primitive with analytic backward."""
    x = Tensor._coerce(x)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    def bwd(g):
        ghat = g * gain.data
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (ghat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        return ((x, dx),
                (gain, (g * xhat).sum(axis=lead)),
                (bias, g.sum(axis=lead)))
    return Tensor._from_op(out_data, (x, gain, bias), bwd)


def broadcast_to(x, shape):
    """Broadcast to `shape`; the gradient sums over the broadcast axes."""
    x = Tensor._coerce(x)
    return Tensor._from_op(
        np.broadcast_to(x.data, shape).copy(), (x,),
        lambda g: ((x, _unbroadcast(g, x.shape)),))


def embedding(table, ids):
    """Row lookup into `table` by an integer id array; grad scatter-adds."""
    table = Tensor._coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError("embedding id out of range")
    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return ((table, full),)
    return Tensor._from_op(table.data[ids], (table,), bwd)


def concat(tensors, axis=0):
    tensors = [Tensor._coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    def bwd(g):
        outs = []
        start = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            outs.append((t, g[tuple(idx)]))
            start += n
        return tuple(outs)
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def sinusoidal_encoding(t, dim, max_period=10000.0):
    """Interleaved sin/cos encoding of a scalar step at geometric frequencies."""
    if dim % 2 != 0:
        raise TensorError("sinusoidal encoding needs an even dimension")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    out = np.empty(dim)
    out[0::2] = np.sin(t * freqs)
    out[1::2] = np.cos(t * freqs)
    return Tensor(out)


def finite_diff_check(f, x, h=1e-5):
    """Max relative error between the analytic gradient of scalar f at x and
    a central finite difference, coordinate by coordinate."""
    probe = Tensor(x.data.copy(), requires_grad=True)
    y = f(probe)
    if y.data.size != 1 or not np.isfinite(y.data).all():
        raise TensorError("f must return a finite scalar")
    if y.requires_grad:
        y.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        fp = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] -= 2 * h
        fm = f(Tensor(bumped.reshape(x.shape))).item()
        central = (fp - fm) / (2 * h)
        a = analytic.ravel()[i]
        worst = max(worst, abs(a - central) / max(1.0, abs(a)))
    return worst


# -- serialization -----------------------------------------------------------


def save_tensor(path, tensor):
    """Flat binary format: magic, version, rank, extents (u64 LE), float64 data."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensor(path, requires_grad=False):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise TensorError(f"{path}: bad magic")
        version, rank = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise TensorError(f"{path}: unsupported version {version}")
        shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(shape)
    return Tensor(data.copy(), requires_grad=requires_grad)
