"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive records its parents and a backward rule written in terms of other
primitives. Running :func:`grad` with ``create_graph=True`` therefore records the
backward pass itself, so gradients of gradients come out of a second call.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from pathscape import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad(flag: bool = True):
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, flag
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # --- introspection
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # --- operators
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, grad_output=None):
        backward(self, grad_output)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents: tuple, rule: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


# --- shape plumbing -------------------------------------------------------


def sum_to(x, shape: tuple) -> Tensor:
    """Reduce a broadcast result back to ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1)
    data = x.data.sum(axis=axes, keepdims=True)
    data = data.reshape(shape)
    return _make(data, (x,), lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.broadcast_to(x.data, shape).copy()
    return _make(data, (x,), lambda g: (sum_to(g, x.shape),))


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (reshape(g, x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (transpose(g, inverse),))


# --- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), rule)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    if exponent == 2.0:
        data = a.data * a.data
    else:
        data = a.data**exponent

    def rule(g):
        if exponent == 2.0:
            return (mul(g, mul(a, 2.0)),)
        if exponent == 1.0:
            return (g,)
        return (mul(g, mul(power(a, exponent - 1.0), exponent)),)

    return _make(data, (a,), rule)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def rule(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), rule)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    """Square root whose derivative is taken as 0 at exactly 0 instead of infinity."""
    a = as_tensor(a)
    out = None

    def rule(g):
        live = out.data > 0
        denom = add(mul(out, 2.0), Tensor(np.where(live, 0.0, 1.0)))
        return (mul(div(g, denom), Tensor(live.astype(np.float64))),)

    out = _make(np.sqrt(a.data), (a,), rule)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        ga = sum_to(matmul(g, _swap(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(_swap(a), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), rule)


def _swap(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kept = (1,) * x.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in axes)
        kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def rule(g):
        return (broadcast_to(reshape(g, kept), x.shape),)

    return _make(data, (x,), rule)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    total = tsum(x, axis, keepdims)
    return mul(total, total.data.size / x.data.size)


# --- indexing -------------------------------------------------------------


def gather(x, index: np.ndarray) -> Tensor:
    """``out[..., m] = x[..., index[m]]``, or 0 where ``index[m] < 0``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    lead = x.shape[:-1]
    size = x.shape[-1]
    flat = x.data.reshape(-1, size)
    data = flat[:, np.maximum(index, 0)]
    if (index < 0).any():
        data[:, index < 0] = 0.0
    data = data.reshape(*lead, index.size)
    return _make(data, (x,), lambda g: (scatter(g, index, size),))


def scatter(g, index: np.ndarray, size: int) -> Tensor:
    """Adjoint of :func:`gather`: sum ``g[..., m]`` into slot ``index[m]``."""
    g = as_tensor(g)
    lead = g.shape[:-1]
    src = np.ascontiguousarray(g.data.reshape(-1, index.size))
    data = kernels.scatter_add(src, index, size).reshape(*lead, size)
    return _make(data, (g,), lambda gg: (gather(gg, index),))


# --- differentiation --------------------------------------------------------


def _toposort(roots: Sequence[Tensor]) -> list:
    order, seen = [], set()
    stack = [(r, False) for r in roots if r.requires_grad]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _run(output: Tensor, grad_output, create_graph: bool) -> dict:
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError(f"gradient of non-scalar output with shape {output.shape} needs grad_output")
        grad_output = Tensor(np.ones_like(output.data))
    grads = {id(output): as_tensor(grad_output)}
    order = _toposort([output])
    with enable_grad(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return grads


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None, create_graph: bool = False) -> list:
    """Gradients of ``output`` with respect to ``inputs`` (zeros where unused).

    With ``create_graph=True`` the returned tensors are themselves differentiable.
    """
    grads = _run(output, grad_output, create_graph)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(Tensor(np.zeros_like(t.data)) if g is None else g)
    return out


def backward(output: Tensor, grad_output=None) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    grads = _run(output, grad_output, create_graph=False)
    for node in _toposort([output]):
        if node.is_leaf and node.requires_grad:
            g = grads.get(id(node))
            if g is None:
                continue
            node.grad = g.data.copy() if node.grad is None else node.grad + g.data
