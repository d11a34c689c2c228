"""Dense float64 arithmetic, seeded Gaussian sampling and a small reverse-mode autodiff.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. A :class:`Value`
wraps an array and records the operation that produced it; :func:`backward`
walks the recorded graph in reverse creation order.

Only the operations needed by attention training and the gradient-moment
estimators are provided. Every op accepts stacked (batched) operands whose
trailing two axes are the matrix axes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "RngStream",
    "Value",
    "as_matrix",
    "backward",
    "concat",
    "cross_entropy",
    "embedding",
    "finite_diff_grad",
    "frobenius_norm",
    "gaussian_matrix",
    "gelu",
    "ipow",
    "layer_norm",
    "matmul",
    "mean",
    "power",
    "relu",
    "row_softmax",
    "sum",
    "transpose",
]

_node_ids = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class RngStream:
    """Seeded, splittable source of random draws.

    The same ``(seed, stream_id)`` always produces the same sequence, no matter
    how many other streams exist or in which order they are consumed.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF])
        return np.random.Generator(np.random.Philox(ss))

    def substream(self, index: int) -> "RngStream":
        # (stream_id, index) pairs are folded into a fresh 64-bit id via SeedSequence
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF, index])
        return RngStream(self.seed, int(ss.generate_state(1, dtype=np.uint64)[0]))


def gaussian_matrix(stream: RngStream | np.random.Generator, rows: int, cols: int, sigma: float = 1.0) -> np.ndarray:
    """i.i.d. N(0, sigma^2) entries. ``sigma`` is a standard deviation."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    gen = stream.generator() if isinstance(stream, RngStream) else stream
    return sigma * gen.standard_normal((rows, cols))


def frobenius_norm(a) -> float:
    a = a.data if isinstance(a, Value) else np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


# ---------------------------------------------------------------------------
# autodiff


class Value:
    """An array node in the autodiff graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_node_ids)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def T(self) -> "Value":
        return transpose(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Value):
            raise TypeError("division by a Value is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _node(data, parents: Sequence[Value], backward_fn) -> Value:
    req = any(p.requires_grad for p in parents)
    return Value(data, req, tuple(parents) if req else (), backward_fn if req else None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(node: Value, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    g = _unbroadcast(g, node.data.shape)
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad += g


def matmul(a, b):
    """Matrix product over the trailing two axes.

    Returns a plain array when neither operand is a :class:`Value`.
    """
    if not isinstance(a, Value) and not isinstance(b, Value):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        _check_matmul(a.shape, b.shape)
        return a @ b
    a, b = _lift(a), _lift(b)
    _check_matmul(a.shape, b.shape)

    def back(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), back)


def _check_matmul(sa: tuple, sb: tuple) -> None:
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise DimensionError(f"cannot multiply shapes {sa} and {sb}")


def transpose(a):
    if not isinstance(a, Value):
        return np.swapaxes(np.asarray(a, dtype=np.float64), -1, -2)

    def back(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(a.data, -1, -2), (a,), back)


def add(a, b):
    a, b = _lift(a), _lift(b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), back)


def mul(a, b):
    """Elementwise product (either operand may be a scalar)."""
    a, b = _lift(a), _lift(b)

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), back)


def ipow(x: np.ndarray, p: int) -> np.ndarray:
    """``x**p`` for a nonnegative integer ``p`` by repeated squaring (much faster than ``np.power``)."""
    result = np.ones_like(x)
    base = x
    while p:
        if p & 1:
            result = result * base
        p >>= 1
        if p:
            base = base * base
    return result


def power(a, p: int):
    """Entrywise integer power."""
    a = _lift(a)
    p = int(p)
    if p < 0:
        raise ValueError("power expects a nonnegative integer exponent")

    def back(g):
        _accumulate(a, g * p * ipow(a.data, p - 1) if p != 1 else g)

    return _node(ipow(a.data, p), (a,), back)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def row_softmax(a):
    """Softmax along the last axis (row-wise for matrices)."""
    if not isinstance(a, Value):
        return _softmax_rows(np.asarray(a, dtype=np.float64))
    f = _softmax_rows(a.data)

    def back(g):
        # vector-Jacobian product of the per-row softmax: F * (g - <g, F>)
        _accumulate(a, f * (g - np.sum(g * f, axis=-1, keepdims=True)))

    return _node(f, (a,), back)


def relu(a):
    a = _lift(a)

    def back(g):
        _accumulate(a, g * (a.data > 0))

    return _node(np.maximum(a.data, 0.0), (a,), back)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh approximation."""
    a = _lift(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _node(0.5 * x * (1.0 + t), (a,), back)


def layer_norm(a, eps: float = 1e-5):
    """Normalize the last axis to zero mean and unit variance (no learned affine)."""
    a = _lift(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - xhat * gx))

    return _node(xhat, (a,), back)


def sum(a, axis=None):
    a = _lift(a)

    def back(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _node(np.sum(a.data, axis=axis), (a,), back)


def mean(a, axis=None):
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def concat(values: Iterable, axis: int = -1):
    vals = [_lift(v) for v in values]
    sizes = [v.data.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for v, part in zip(vals, np.split(g, splits, axis=axis)):
            _accumulate(v, part)

    return _node(np.concatenate([v.data for v in vals], axis=axis), vals, back)


def embedding(table: Value, ids: np.ndarray):
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids)

    def back(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accumulate(table, full)

    return _node(table.data[ids], (table,), back)


def cross_entropy(logits, labels: np.ndarray):
    """Mean softmax cross-entropy of ``logits`` (B, C) against integer ``labels``."""
    logits = _lift(logits)
    labels = np.asarray(labels)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    b = logits.data.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(b), labels] -= 1.0
        _accumulate(logits, g * d / b)

    return _node(np.asarray(loss), (logits,), back)


def backward(loss: Value) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every node reachable from ``loss``.

    Gradients of reachable nodes are reset first, so repeated calls do not
    accumulate. Returns ``{node.id: grad}`` for nodes that require gradients.
    """
    if loss.data.size != 1:
        raise DimensionError(f"loss must be scalar (1x1), got shape {loss.data.shape}")
    order: list[Value] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        order.append(node)
        stack.extend(node._parents)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    # parents are always created before children, so descending id is a topological order
    for node in sorted(order, key=lambda v: v.id, reverse=True):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {n.id: n.grad for n in order if n.requires_grad and n.grad is not None}


def finite_diff_grad(f: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``at``."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.array(at, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
