"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every operation on :class:`Tensor` records a node whose backward closure maps
the output gradient to one gradient per parent. Nodes are ordered by creation,
so reverse creation order is a valid topological order for the backward pass.

Log-space conventions: ``log`` of a nonpositive input is ``-inf`` with a zero
gradient, and any node whose forward value is ``-inf`` passes zero gradient
to its parents.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

from combinfer.errors import NonScalarRoot, ShapeMismatch

_creation = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._order = next(_creation)

    # -- basic protocol -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __float__(self):
        return float(self.data)

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self):
        return detach(self)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor that accumulates gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(*arrays):
    try:
        return np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError as err:
        raise ShapeMismatch(str(err)) from None


# -- elementwise binary ops ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    with np.errstate(invalid="ignore"):
        data = a.data - b.data
    return _node(data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    with np.errstate(invalid="ignore"):
        data = a.data * b.data

    def backward_fn(g):
        with np.errstate(invalid="ignore"):
            return (
                np.nan_to_num(g * b.data, nan=0.0) if a.requires_grad else None,
                np.nan_to_num(g * a.data, nan=0.0) if b.requires_grad else None,
            )

    return _node(data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data if a.requires_grad else None
            gb = -g * a.data / (b.data * b.data) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), backward_fn)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds and ``b`` elsewhere; gradients follow the selection."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(cond, a.data, b.data)
    data = np.where(cond, a.data, b.data)
    return _node(data, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# -- elementwise unary ops -----------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), -np.inf)

    def backward_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(x > 0, g / np.where(x > 0, x, 1.0), 0.0),)

    return _node(data, (a,), backward_fn)


def pow(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("pow supports scalar exponents only")
    p = float(exponent)
    data = a.data**p
    return _node(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(data, (a,), lambda g: (g * data * (1.0 - data),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    e = np.exp(-np.abs(x))
    slope = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(data, (a,), lambda g: (g * slope,))


def detach(a) -> Tensor:
    """Same value, no gradient path."""
    a = as_tensor(a)
    return Tensor(a.data)


# -- reductions ------------------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _node(data, (a,), lambda g: (_expand(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)
    return _node(data, (a,), lambda g: (_expand(g, shape, axis, keepdims) / count,))


def logsumexp(a, axis=None, keepdims=False) -> Tensor:
    """Max-shifted log-sum-exp; an all ``-inf`` slice reduces to ``-inf``."""
    a = as_tensor(a)
    x = a.data
    shape = x.shape
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore", under="ignore"):
        s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
        out = np.log(s) + m
    data = out if keepdims else np.squeeze(out, axis=axis) if axis is not None else out.reshape(())

    def backward_fn(g):
        g = g if keepdims or axis is None else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore", under="ignore"):
            soft = np.where(np.isneginf(x), 0.0, np.exp(x - out))
        return (np.broadcast_to(g, shape) * soft,)

    return _node(data, (a,), backward_fn)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis=-1) -> Tensor:
    return exp(log_softmax(a, axis))


# -- linear algebra and shape ops -------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeMismatch("matmul needs operands of rank >= 1")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeMismatch(str(err)) from None

    def backward_fn(g):
        A, B = a.data, b.data
        A2 = A[None, :] if A.ndim == 1 else A
        B2 = B[:, None] if B.ndim == 1 else B
        g2 = g
        if A.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if B.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(B2, -1, -2))
            if A.ndim == 1:
                ga = np.squeeze(ga, -2)
            ga = _unbroadcast(ga, A.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(A2, -1, -2), g2)
            if B.ndim == 1:
                gb = np.squeeze(gb, -1)
            gb = _unbroadcast(gb, B.shape)
        return ga, gb

    return _node(data, (a, b), backward_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as err:
        raise ShapeMismatch(str(err)) from None
    return _node(data, (a,), lambda g: (g,))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), backward_fn)


def stack(tensors, axis=0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    data = np.stack([t.data for t in tensors], axis=axis)
    return _node(data, tensors, lambda g: tuple(np.moveaxis(g, axis, 0)))


def concatenate(tensors, axis=-1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take_last(a, index) -> Tensor:
    """Gather ``a[..., index]`` along the last axis, broadcasting leading dims."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    try:
        full = np.broadcast_shapes(a.shape[:-1], idx.shape) + a.shape[-1:]
    except ValueError as err:
        raise ShapeMismatch(str(err)) from None
    src = np.broadcast_to(a.data, full)
    idx_full = np.broadcast_to(idx, full[:-1])[..., None]
    data = np.take_along_axis(src, idx_full, axis=-1)[..., 0]
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(full)
        np.put_along_axis(out, idx_full, g[..., None], axis=-1)
        return (_unbroadcast(out, shape),)

    return _node(data, (a,), backward_fn)


def reindex(a, ancestors, axis: int = 0) -> Tensor:
    """Replicate slices of ``a`` along ``axis`` per ancestor indices.

    ``ancestors`` has the shape of the leading dims of ``a`` it indexes; entry
    ``ancestors[l, b, ...]`` picks which slice along ``axis`` lands at position ``l``.
    """
    a = as_tensor(a)
    anc = np.asarray(ancestors, dtype=np.int64)
    expand = anc.reshape(anc.shape + (1,) * (a.ndim - anc.ndim))
    idx = np.broadcast_to(expand, a.shape)
    data = np.take_along_axis(a.data, idx, axis=axis)
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(shape)
        grid = list(np.indices(shape, sparse=True))
        grid[axis] = idx
        np.add.at(out, tuple(grid), g)
        return (out,)

    return _node(data, (a,), backward_fn)


# -- backward pass ----------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into the ``grad`` of every reachable leaf."""
    if root.data.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack_.extend(p for p in node._parents if p.requires_grad and id(p) not in nodes)
    grads = {id(root): np.ones_like(root.data)}
    for node in sorted(nodes.values(), key=lambda n: n._order, reverse=True):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=np.float64).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
            continue
        neg_inf = np.isneginf(node.data)
        if neg_inf.any():
            g = np.where(neg_inf, 0.0, g)
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg), parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def grad(fn, params):
    """Evaluate ``fn()`` and return (value, [d value / d p for p in params])."""
    for p in params:
        p.zero_grad()
    out = fn()
    backward(out)
    return out.item(), [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


LOG_2PI = math.log(2.0 * math.pi)
