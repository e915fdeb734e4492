"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class EngineError(ValueError):
    pass


class ShapeMismatch(EngineError):
    pass


class NonFinite(FloatingPointError):
    pass


class NonScalarRoot(EngineError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad", "name")
    # make ndarray (op) Tensor defer to the Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_fn=None, op="leaf",
                 requires_grad=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFinite(f"non-finite value produced by {op!r}")
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self.grad = np.zeros_like(value) if (requires_grad and not parents) else None

    # -- basics -----------------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return not self.parents

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def item(self) -> float:
        if np.size(self.value) != 1:
            raise NonScalarRoot(f"item() of a tensor with shape {np.shape(self.value)}")
        return float(np.asarray(self.value).reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.value.size != 1:
            raise NonScalarRoot(f"backward needs a scalar root, got shape {self.shape}")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is not None:
                    node.grad += g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeMismatch(f"{node.op}: gradient {pg.shape} for parent {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor(a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor(a.value * b.value, (a, b),
                  lambda g: (_unbroadcast(g * b.value, a.shape),
                             _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.value / b.value
    return Tensor(out, (a, b),
                  lambda g: (_unbroadcast(g / b.value, a.shape),
                             _unbroadcast(-g * out / b.value, b.shape)), "div")


# -- elementwise unary -------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.value)
    pos = x.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.value[pos]))
    ez = np.exp(x.value[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.value)
    sig = np.exp(x.value - out)
    return Tensor(out, (x,), lambda g: (g * sig,), "softplus")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.value <= 0):
        raise NonFinite("log of non-positive value")
    return Tensor(np.log(x.value), (x,), lambda g: (g / x.value,), "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return Tensor(out, (x,), lambda g: (g * out,), "exp")


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.value ** 2, (x,), lambda g: (2.0 * g * x.value,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.value)
    return Tensor(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    x = as_tensor(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return Tensor(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,), "clip")


# -- reductions and shape ----------------------------------------------------

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(out, (x,), back, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else x.shape[axis]
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def weighted_sum(values, weights) -> Tensor:
    """sum_i weights_i * values_i over a vector (or column) of values."""
    values, weights = as_tensor(values), as_tensor(weights)
    if values.value.reshape(-1).shape != weights.value.reshape(-1).shape:
        raise ShapeMismatch(f"weighted_sum: {values.shape} vs {weights.shape}")
    v = values.value.reshape(-1)
    w = weights.value.reshape(-1)
    return Tensor(np.dot(w, v), (values, weights),
                  lambda g: ((g * w).reshape(values.shape), (g * v).reshape(weights.shape)),
                  "weighted_sum")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatch("transpose expects a matrix")
    return Tensor(x.value.T.copy(), (x,), lambda g: (g.T,), "transpose")


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in ts]}") from exc
    edges = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        return tuple(np.take(g, np.arange(edges[k], edges[k + 1]), axis=axis)
                     for k in range(len(ts)))

    return Tensor(out, ts, back, "concat")


def take_rows(x, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(x.value)
        np.add.at(out, index, g)
        return (out,)

    return Tensor(x.value[index], (x,), back, "take_rows")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return Tensor(a.value @ b.value, (a, b),
                  lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def spmm(matrix: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"spmm: {matrix.shape} @ {x.shape}")
    mt = matrix.T.tocsr()
    return Tensor(np.asarray(matrix @ x.value), (x,), lambda g: (np.asarray(mt @ g),), "spmm")


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 1:
        return reshape(softmax_rows(reshape(x, (1, -1))), x.shape)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor(out, (x,), back, "softmax_rows")


def logsumexp_rows(x) -> Tensor:
    x = as_tensor(x)
    m = x.value.max(axis=1, keepdims=True)
    s = np.log(np.exp(x.value - m).sum(axis=1, keepdims=True)) + m
    soft = np.exp(x.value - s)
    return Tensor(s[:, 0], (x,), lambda g: (g[:, None] * soft,), "logsumexp_rows")


def sqdist(a, b) -> Tensor:
    """Pairwise squared Euclidean distances between rows of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"sqdist: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    out = (av ** 2).sum(1)[:, None] + (bv ** 2).sum(1)[None, :] - 2.0 * av @ bv.T
    np.maximum(out, 0.0, out=out)

    def back(g):
        ga = 2.0 * (g.sum(1)[:, None] * av - g @ bv)
        gb = 2.0 * (g.sum(0)[:, None] * bv - g.T @ av)
        return ga, gb

    return Tensor(out, (a, b), back, "sqdist")


def custom(value, parents, backward_fn, op: str) -> Tensor:
    """Hook for ops defined outside the engine (e.g. an optimal-transport solve)."""
    return Tensor(value, tuple(as_tensor(p) for p in parents), backward_fn, op)
