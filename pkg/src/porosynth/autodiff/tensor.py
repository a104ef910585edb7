"""Tensor type, graph recording and the backward pass.

Gradients of complex tensors are stored as ``dL/dRe + 1j * dL/dIm`` for a
real loss ``L``; with that convention a linear operator ``A`` propagates
gradients through its adjoint ``A^H``.
"""
from __future__ import annotations

import numpy as np

from ..errors import GraphConsumed, ShapeMismatch


def _as_array(data, dtype):
    a = np.asarray(data)
    if dtype is not None:
        return a.astype(dtype, copy=False)
    if np.iscomplexobj(a):
        return a.astype(np.complex64 if a.dtype == np.complex64 else np.complex128, copy=False)
    if a.dtype in (np.float32, np.float64):
        return a
    return a.astype(np.float32)


class Tensor:
    """Dense array with an optional gradient accumulator."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=np.float32, _prev=(), _backward=None, _op=""):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad and not _prev else None
        self._prev = _prev
        self._backward = _backward
        self._op = _op
        self._freed = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._prev

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self):
        return Tensor(self.data, dtype=None)

    def backward(self, grad=None):
        if self.data.size != 1 and grad is None:
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise GraphConsumed("graph already consumed by a previous backward(); rebuild it")
        topo = _topological(self)
        grads = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad += _fit(g, node.data)
                continue
            if node._freed:
                raise GraphConsumed("graph already consumed by a previous backward(); rebuild it")
            pgs = node._backward(g)
            for p, pg in zip(node._prev, pgs):
                if pg is None or not p.requires_grad:
                    continue
                pg = _fit(pg, p.data)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        for node in topo:
            if not node.is_leaf:
                node._backward = None
                node._freed = True

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _fit(g, like):
    """Cast a gradient to the dtype of the tensor it belongs to."""
    if np.iscomplexobj(g) and not np.iscomplexobj(like):
        g = g.real
    if g.shape != like.shape:
        raise ShapeMismatch(f"gradient shape {g.shape} does not match tensor shape {like.shape}")
    return g.astype(like.dtype, copy=False)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(data, requires_grad, dtype)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = None
    if like is not None and np.isscalar(x):
        dtype = like.dtype
    return Tensor(np.asarray(x), dtype=dtype)


def make(data, parents, backward, op):
    """Wrap an op result, recording the graph edge only when needed."""
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data, dtype=None, _op=op)
    t = Tensor(data, dtype=None, _prev=tuple(parents), _backward=backward, _op=op)
    t.requires_grad = True
    return t


def _same_shape(a, b, op):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g, dtype=np.result_type(g, np.float64)).reshape(shape)


def add(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _same_shape(a, b, "add")
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _same_shape(a, b, "sub")
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _same_shape(a, b, "mul")
    return make(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * np.conj(b.data), a.shape),
                           _unbroadcast(g * np.conj(a.data), b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _same_shape(a, b, "div")
    out = a.data / b.data
    return make(out, (a, b),
                lambda g: (_unbroadcast(g / np.conj(b.data), a.shape),
                           _unbroadcast(-g * np.conj(out / b.data), b.shape)), "div")


def power(a, p):
    x = a.data
    return make(x**p, (a,), lambda g: (g * p * x ** (p - 1),), "pow")


def add_bias(x, b):
    """Add a per-channel bias ``b`` of shape (C,) along axis 1."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias: input {x.shape} and bias {b.shape} are incompatible")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return make(x.data + b.data.reshape(shape), (x, b),
                lambda g: (g, np.sum(g, axis=axes, dtype=np.float64)), "add_bias")


def tsum(x, axis=None):
    acc = np.complex128 if np.iscomplexobj(x.data) else np.float64
    out = np.sum(x.data, axis=axis, dtype=acc).astype(x.dtype)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make(out, (x,), back, "sum")


def mean(x, axis=None):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


def reshape(x, shape):
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return make(a.data @ b.data, (a, b),
                lambda g: (g @ np.conj(b.data).T, np.conj(a.data).T @ g), "matmul")


def index(x, idx):
    def back(g):
        out = np.zeros_like(x.data, dtype=np.result_type(x.data, g))
        np.add.at(out, idx, g)
        return (out,)

    return make(x.data[idx], (x,), back, "index")


def stack(tensors, axis=0):
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"stack: shapes differ {sorted(shapes)}")
    return make(np.stack([t.data for t in tensors], axis), tuple(tensors),
                lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), "stack")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make(np.concatenate([t.data for t in tensors], axis), tuple(tensors),
                lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def roll(x, shift, axis):
    return make(np.roll(x.data, shift, axis), (x,),
                lambda g: (np.roll(g, tuple(-np.asarray(shift)), axis),), "roll")


def exp(x):
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x):
    pos = x.data > 0
    return make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x, slope=0.2):
    pos = x.data > 0
    k = np.where(pos, 1.0, slope).astype(x.dtype)
    return make(x.data * k, (x,), lambda g: (g * k,), "leaky_relu")


def sigmoid(x):
    out = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x):
    """log(1 + exp(x)), computed without overflow."""
    d = x.data
    out = (np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))).astype(x.dtype)
    sig = (0.5 * (1.0 + np.tanh(0.5 * d))).astype(x.dtype)
    return make(out, (x,), lambda g: (g * sig,), "softplus")


def softmax_channel(x):
    """Softmax over axis 1."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return make(out, (x,), back, "softmax_channel")


def modulus(x):
    """Elementwise magnitude; the subgradient at exactly zero is zero."""
    mag = np.abs(x.data)
    safe = np.where(mag > 0, mag, 1)

    def back(g):
        return (np.where(mag > 0, g * x.data / safe, 0),)

    return make(mag, (x,), back, "modulus")


def real(x):
    return make(np.real(x.data).copy(), (x,), lambda g: (g.astype(x.dtype),), "real")


def clip_min(x, lo):
    """max(x, lo); the gradient passes only where x > lo."""
    keep = x.data > lo
    return make(np.where(keep, x.data, lo).astype(x.dtype), (x,), lambda g: (g * keep,), "clip_min")
