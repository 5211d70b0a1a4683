"""Reverse-mode automatic differentiation on numpy arrays.

Every op returns a new `Tensor` that remembers its parents and a closure that
pushes the output gradient back into them. `Tensor.backward` walks the graph in
reverse topological order and then frees it.
"""
from __future__ import annotations

import threading

import numpy as np


class GraphError(RuntimeError):
    pass


# per-thread, so evaluation worker threads cannot switch recording off for others
_grad_mode = threading.local()


def grad_enabled():
    return getattr(_grad_mode, "enabled", True)


class no_grad:
    """Context manager that stops graph recording (inference only)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _grad_mode.enabled = False

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="", name=None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype(data))
        self.grad = None
        self.requires_grad = requires_grad or (grad_enabled() and any(p.requires_grad for p in parents))
        self._parents = parents if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None
        self._consumed = False
        self.op = op
        self.name = name

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

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
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's `.grad`; frees the graph."""
        if grad is None and self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward(); re-run forward")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node._accumulate(g)
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward_fn = None
            node._consumed = True
        self._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _default_dtype(data):
    arr = np.asarray(data)
    if arr.dtype.kind in "fc":
        return arr.dtype
    return np.float64


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return Tensor(a.data + b.data, parents=(a, b), op="add",
                  backward_fn=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> Tensor:
    return Tensor(-a.data, parents=(a,), op="neg", backward_fn=lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return Tensor(a.data * b.data, parents=(a, b), op="mul", backward_fn=backward)


def square(a) -> Tensor:
    return Tensor(a.data * a.data, parents=(a,), op="square",
                  backward_fn=lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), op="sqrt", backward_fn=lambda g: (0.5 * g / out,))


def abs_(a) -> Tensor:
    return Tensor(np.abs(a.data), parents=(a,), op="abs",
                  backward_fn=lambda g: (np.sign(a.data) * g,))


def log(a) -> Tensor:
    return Tensor(np.log(a.data), parents=(a,), op="log", backward_fn=lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor(out, parents=(a,), op="sigmoid",
                  backward_fn=lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, parents=(a,), op="tanh", backward_fn=lambda g: (g * (1.0 - out * out),))


def elu(a, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return Tensor(out, parents=(a,), op="elu",
                  backward_fn=lambda g: (g * np.where(x > 0, 1.0, neg_part + alpha),))


def minimum_const(a, cap: float) -> Tensor:
    """min(a, cap); gradient is zero where the cap is active."""
    x = a.data
    return Tensor(np.minimum(x, cap), parents=(a,), op="min_const",
                  backward_fn=lambda g: (g * (x < cap),))


def _sigmoid(x):
    # overflow-free logistic
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        return Tensor(a.data.sum(), parents=(a,), op="sum",
                      backward_fn=lambda g: (np.broadcast_to(g, shape),))
    out = a.data.sum(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return Tensor(out, parents=(a,), op="sum", backward_fn=backward)


def mean(a, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), parents=(a,), op="reshape",
                  backward_fn=lambda g: (g.reshape(old),))


def permute(a, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), parents=(a,), op="permute",
                  backward_fn=lambda g: (g.transpose(inverse),))


def flip(a, axis) -> Tensor:
    return Tensor(np.flip(a.data, axis), parents=(a,), op="flip",
                  backward_fn=lambda g: (np.flip(g, axis),))


def getitem(a, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor(a.data[index], parents=(a,), op="getitem", backward_fn=backward)


def concat(tensors, axis=1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors),
                  op="concat", backward_fn=backward)


def concat_channels(*tensors) -> Tensor:
    """Concatenate [B, C, T, F] tensors along the channel axis."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tensors[0]
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ValueError(f"concat_channels shape mismatch: {base} vs {t.shape}")
    return concat(tensors, axis=1)


def split_channels(a, sizes) -> list[Tensor]:
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != a.shape[1]:
        raise ValueError(f"split sizes {sizes} do not sum to {a.shape[1]} channels")
    return [a[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor(np.stack([t.data for t in tensors], axis=axis), parents=tuple(tensors),
                  op="stack", backward_fn=backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """[N, K] @ [K, M] -> [N, M]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return Tensor(a.data @ b.data, parents=(a, b), op="matmul",
                  backward_fn=lambda g: (g @ b.data.T, a.data.T @ g))


def transpose2d(a) -> Tensor:
    return permute(a, (1, 0))
