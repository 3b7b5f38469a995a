"""Minimal reverse-mode differentiation over dense float64 arrays.

Every operation builds a fresh :class:`DiffNode` holding its value and the
rules needed to push an upstream gradient back to its parents.  Graphs are
rebuilt on every forward pass and never shared between threads.

Gradients are available with respect to any node created with
``requires_grad=True``, which covers both model parameters and inputs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-300


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DiffNode:
    """A value in a differentiable computation graph."""

    __slots__ = ("value", "grad", "parents", "requires_grad", "op")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: Sequence[tuple["DiffNode", Callable[[np.ndarray], np.ndarray]]] = (),
        op: str = "",
    ):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = [(p, rule) for p, rule in parents if p.requires_grad]
        self.requires_grad = bool(requires_grad) or bool(self.parents)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"DiffNode(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_node(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_node(x) -> DiffNode:
    return x if isinstance(x, DiffNode) else DiffNode(x)


def constant(x) -> DiffNode:
    return DiffNode(x, requires_grad=False)


def variable(x) -> DiffNode:
    return DiffNode(x, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: DiffNode, b: DiffNode, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return DiffNode(
        av @ bv,
        parents=[(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)],
        op="matmul",
    )


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return DiffNode(
        a.value + b.value,
        parents=[(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))],
        op="add",
    )


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return DiffNode(
        a.value - b.value,
        parents=[(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))],
        op="sub",
    )


def mul(a: DiffNode, b: DiffNode) -> DiffNode:
    """Elementwise product with broadcasting."""
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value
    return DiffNode(
        av * bv,
        parents=[
            (a, lambda g: _unbroadcast(g * bv, av.shape)),
            (b, lambda g: _unbroadcast(g * av, bv.shape)),
        ],
        op="mul",
    )


def scale(a: DiffNode, c: float) -> DiffNode:
    a = as_node(a)
    c = float(c)
    return DiffNode(a.value * c, parents=[(a, lambda g: g * c)], op="scale")


def relu(a: DiffNode) -> DiffNode:
    a = as_node(a)
    mask = a.value > 0
    return DiffNode(np.where(mask, a.value, 0.0), parents=[(a, lambda g: g * mask)], op="relu")


def log(a: DiffNode, floor: float = LOG_FLOOR) -> DiffNode:
    """Natural log with the argument clamped below at ``floor``.

    Inside the clamped region the derivative is zero.
    """
    a = as_node(a)
    clamped = np.maximum(a.value, floor)
    live = a.value >= floor
    return DiffNode(
        np.log(clamped),
        parents=[(a, lambda g: np.where(live, g / clamped, 0.0))],
        op="log",
    )


def sum(a: DiffNode, axis: int | None = None) -> DiffNode:  # noqa: A001
    a = as_node(a)
    shape = a.shape

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return DiffNode(a.value.sum(axis=axis), parents=[(a, rule)], op="sum")


def mean(a: DiffNode, axis: int | None = None) -> DiffNode:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def rowdot(a: DiffNode, b: DiffNode) -> DiffNode:
    """Per-row inner product of two ``[n x k]`` arrays, giving ``[n]``."""
    return sum(mul(a, b), axis=1)


def take_rows(a: DiffNode, index: np.ndarray) -> DiffNode:
    """Gather rows ``a[index]``; repeated indices accumulate on the way back."""
    a = as_node(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return DiffNode(a.value[index], parents=[(a, rule)], op="take_rows")


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return temperature


def softmax_array(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row softmax of a plain array, computed with max-subtraction."""
    temperature = _check_temperature(temperature)
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    temperature = _check_temperature(temperature)
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_row(z: DiffNode, temperature: float = 1.0) -> DiffNode:
    z = as_node(z)
    if z.value.ndim != 2:
        raise ShapeError(f"softmax_row expects a 2-D array, got shape {z.shape}")
    s = softmax_array(z.value, temperature)

    def rule(g):
        return s * (g - (g * s).sum(axis=1, keepdims=True)) / temperature

    return DiffNode(s, parents=[(z, rule)], op="softmax")


def log_softmax_row(z: DiffNode, temperature: float = 1.0) -> DiffNode:
    """Row log-softmax of ``z / temperature``; never produces ``-inf``."""
    z = as_node(z)
    if z.value.ndim != 2:
        raise ShapeError(f"log_softmax_row expects a 2-D array, got shape {z.shape}")
    out = log_softmax_array(z.value, temperature)
    s = np.exp(out)

    def rule(g):
        return (g - s * g.sum(axis=1, keepdims=True)) / temperature

    return DiffNode(out, parents=[(z, rule)], op="log_softmax")


def _topological_order(root: DiffNode) -> list[DiffNode]:
    order: list[DiffNode] = []
    seen: set[int] = set()
    stack: list[tuple[DiffNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: DiffNode) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every reachable node."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    root.grad = np.ones_like(root.value)
    for node in reversed(_topological_order(root)):
        g = node.grad
        for parent, rule in node.parents:
            parent.grad = parent.grad + rule(g)


def grad_of(fn: Callable[..., DiffNode], *arrays: np.ndarray) -> list[np.ndarray]:
    """Gradient of scalar ``fn(*nodes)`` with respect to each input array."""
    nodes = [variable(a) for a in arrays]
    backward(fn(*nodes))
    return [n.grad for n in nodes]


def numeric_grad(
    fn: Callable[..., float], arrays: Iterable[np.ndarray], step: float = 1e-5
) -> list[np.ndarray]:
    """Central finite-difference gradient of a scalar function of plain arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*arrays)
            flat[i] = orig - step
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads
