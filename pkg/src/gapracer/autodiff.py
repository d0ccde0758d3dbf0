"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are carried by C-contiguous ``numpy.float64`` arrays. A ``Node``
wraps one array together with its gradient slot and the local-gradient
rules linking it to its parents; graphs are built define-by-run and torn
down after each backward pass. Gradients accumulate in reverse order of
construction, which is a valid reverse topological order and keeps runs
bit-reproducible.

Scope is deliberately small: 2-D matmul, elementwise ops, softmax,
sum/mean reductions, concatenation and slicing — enough for MLPs,
multi-head attention and Gaussian likelihood training. Broadcasting is
supported only for scalars and trailing-axis cases (row-vector bias).
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_node_counter = itertools.count()
_grad_enabled = True


def as_tensor(x) -> np.ndarray:
    """Coerce to a float64 array and reject non-finite entries."""
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("tensor contains NaN/Inf entries")
    return a


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One value in the computation graph.

    ``parents`` holds ``(parent, rule)`` pairs where ``rule`` maps the
    upstream gradient to this parent's gradient contribution.
    """

    __slots__ = ("value", "grad", "parents", "name", "_order", "_backward_done")

    def __init__(self, value: np.ndarray, parents=(), name: str | None = None):
        self.value = value
        self.grad = None
        self.parents = parents if _grad_enabled else ()
        self.name = name
        self._order = next(_node_counter)
        self._backward_done = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"

    # operator sugar; scalars are accepted on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def constant(x) -> Node:
    """Wrap a value as a leaf node that never receives gradients."""
    return Node(as_tensor(x))


def parameter(x, name: str) -> Node:
    """Wrap a value as a named trainable leaf."""
    return Node(as_tensor(x), name=name)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops


def matmul(a: Node, b: Node) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul needs (m,k)x(k,n), got {a.value.shape} x {b.value.shape}")
    out = a.value @ b.value
    av, bv = a.value, b.value
    return Node(out, ((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)))


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value
    ash, bsh = a.value.shape, b.value.shape
    return Node(out, ((a, lambda g: _unbroadcast(g, ash)),
                      (b, lambda g: _unbroadcast(g, bsh))))


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value - b.value
    ash, bsh = a.value.shape, b.value.shape
    return Node(out, ((a, lambda g: _unbroadcast(g, ash)),
                      (b, lambda g: _unbroadcast(-g, bsh))))


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value
    av, bv = a.value, b.value
    return Node(out, ((a, lambda g: _unbroadcast(g * bv, av.shape)),
                      (b, lambda g: _unbroadcast(g * av, bv.shape))))


def div(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value
    if not np.all(np.isfinite(out)):
        raise NumericError("division produced non-finite values")
    av, bv = a.value, b.value
    return Node(out, ((a, lambda g: _unbroadcast(g / bv, av.shape)),
                      (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape))))


def tanh(a: Node) -> Node:
    a = _wrap(a)
    t = np.tanh(a.value)
    return Node(t, ((a, lambda g: g * (1.0 - t * t)),))


def relu(a: Node) -> Node:
    a = _wrap(a)
    mask = a.value > 0.0
    return Node(np.where(mask, a.value, 0.0), ((a, lambda g: g * mask),))


def exp(a: Node) -> Node:
    a = _wrap(a)
    out = np.exp(a.value)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflowed to Inf")
    return Node(out, ((a, lambda g: g * out),))


def log(a: Node) -> Node:
    a = _wrap(a)
    if not np.all(a.value > 0.0):
        raise NumericError("log requires strictly positive input")
    av = a.value
    return Node(np.log(av), ((a, lambda g: g / av),))


def softplus(a: Node) -> Node:
    """ln(1 + e^x), computed without overflow; gradient is the sigmoid."""
    a = _wrap(a)
    out = np.logaddexp(0.0, a.value)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Node(out, ((a, lambda g: g * sig),))


def softmax(x: Node, axis: int = -1) -> Node:
    """Max-stabilized softmax along ``axis``; outputs sum to one."""
    x = _wrap(x)
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def pull(g):
        return s * (g - np.sum(g * s, axis=axis, keepdims=True))

    return Node(s, ((x, pull),))


def _check_axis(x: Node, axis):
    if axis is not None and not (-x.value.ndim <= axis < x.value.ndim):
        raise ShapeError(f"axis {axis} invalid for shape {x.value.shape}")


def reduce_sum(x: Node, axis=None, keepdims: bool = False) -> Node:
    x = _wrap(x)
    _check_axis(x, axis)
    out = np.sum(x.value, axis=axis, keepdims=keepdims)
    xsh = x.value.shape

    def pull(g):
        if axis is None or keepdims:
            return np.broadcast_to(g, xsh).copy()
        return np.broadcast_to(np.expand_dims(g, axis), xsh).copy()

    return Node(np.asarray(out, dtype=np.float64), ((x, pull),))


def reduce_mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    x = _wrap(x)
    _check_axis(x, axis)
    n = x.value.size if axis is None else x.value.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def concat(nodes, axis: int = 0) -> Node:
    nodes = [_wrap(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    parents = []
    offset = 0
    for n in nodes:
        width = n.value.shape[axis]
        lo = offset

        def pull(g, lo=lo, width=width):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, lo + width)
            return g[tuple(idx)]

        parents.append((n, pull))
        offset += width
    return Node(out, tuple(parents))


def narrow(x: Node, axis: int, start: int, length: int) -> Node:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    x = _wrap(x)
    _check_axis(x, axis)
    idx = [slice(None)] * x.value.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    xsh = x.value.shape

    def pull(g):
        full = np.zeros(xsh)
        full[idx] = g
        return full

    return Node(x.value[idx].copy(), ((x, pull),))


def transpose(x: Node) -> Node:
    x = _wrap(x)
    if x.value.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.value.shape}")
    return Node(x.value.T.copy(), ((x, lambda g: g.T),))


def backward(loss: Node) -> None:
    """Populate gradients of every node reachable from a scalar loss.

    A second call on the same loss is rejected; rebuild the graph (or
    reset gradients) between steps instead of re-propagating.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if loss._backward_done:
        raise ContractError("backward already ran for this loss; rebuild the graph first")
    loss._backward_done = True

    # iterative DFS; construction order already topologically sorts the graph
    reachable = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        reachable.append(node)
        stack.extend(p for p, _ in node.parents)
    reachable.sort(key=lambda n: n._order, reverse=True)

    loss.grad = np.ones_like(loss.value)
    for node in reachable:
        if node.grad is None:
            continue
        g = node.grad
        for parent, rule in node.parents:
            contribution = rule(g)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += contribution


# ---------------------------------------------------------------------------
# initialization and optimization


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)]."""
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class AdamState:
    """Moment estimates for one named parameter collection."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Node], state: AdamState) -> None:
    """One bias-corrected Adam update, in place over every parameter.

    Parameters whose gradient was never populated are treated as having
    zero gradient (their moments still decay).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: dict[str, Node]) -> None:
    for p in params.values():
        p.grad = None
