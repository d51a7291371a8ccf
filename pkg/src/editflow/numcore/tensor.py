"""Dense float64 tensors with reverse-mode differentiation.

Deliberately small: row-major numpy storage, scalar broadcast only, and
a tape of parent links that ``backward`` walks once in reverse
topological order. Everything runs in float64 so downstream tolerance
budgets stay tight.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

Scalarish = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class Tensor:
    """A node in the compute graph: a value, a gradient slot, and parents."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] = _noop

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, grad={'set' if self.grad is not None else 'none'})"


def _noop() -> None:
    return None


def _node(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    out._parents = tuple(parents)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} neither match nor scalar-broadcast")


def _grad_for(t: Tensor, g: np.ndarray) -> np.ndarray:
    # Reduce a broadcast gradient back to a scalar operand's shape.
    if _is_scalar(t) and g.shape != t.data.shape:
        return np.asarray(np.sum(g)).reshape(t.data.shape)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)
    out = _node(a.data + b.data, (a, b))

    def _bw():
        if a.requires_grad:
            a.accumulate(_grad_for(a, out.grad))
        if b.requires_grad:
            b.accumulate(_grad_for(b, out.grad))

    out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)
    out = _node(a.data - b.data, (a, b))

    def _bw():
        if a.requires_grad:
            a.accumulate(_grad_for(a, out.grad))
        if b.requires_grad:
            b.accumulate(_grad_for(b, -out.grad))

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    """Elementwise product; either operand may be a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)
    out = _node(a.data * b.data, (a, b))

    def _bw():
        if a.requires_grad:
            a.accumulate(_grad_for(a, out.grad * b.data))
        if b.requires_grad:
            b.accumulate(_grad_for(b, out.grad * a.data))

    out._backward = _bw
    return out


def div(a, b) -> Tensor:
    """Elementwise quotient; either operand may be a scalar. Denominator must be nonzero."""
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("div", a, b)
    if np.any(b.data == 0.0):
        raise ValueError("div: zero denominator")
    out = _node(a.data / b.data, (a, b))

    def _bw():
        if a.requires_grad:
            a.accumulate(_grad_for(a, out.grad / b.data))
        if b.requires_grad:
            b.accumulate(_grad_for(b, -out.grad * a.data / (b.data * b.data)))

    out._backward = _bw
    return out


def scale(a, c: Scalarish) -> Tensor:
    """Multiply by a plain python constant (no graph node for the constant)."""
    a = as_tensor(a)
    c = float(c)
    out = _node(a.data * c, (a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad * c)

    out._backward = _bw
    return out


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: expects 2-d @ (1-d|2-d), got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b))

    def _bw():
        g = out.grad
        if b.data.ndim == 1:
            if a.requires_grad:
                a.accumulate(np.outer(g, b.data))
            if b.requires_grad:
                b.accumulate(a.data.T @ g)
        else:
            if a.requires_grad:
                a.accumulate(g @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ g)

    out._backward = _bw
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = _node(y, (a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad * (1.0 - y * y))

    out._backward = _bw
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid_np(a.data)
    out = _node(y, (a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad * y * (1.0 - y))

    out._backward = _bw
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = _node(np.where(mask, a.data, 0.0), (a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad * mask)

    out._backward = _bw
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: requires strictly positive input")
    out = _node(np.log(a.data), (a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad / a.data)

    out._backward = _bw
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed so large |x| neither overflows nor loses the tail."""
    a = as_tensor(a)
    y = np.logaddexp(0.0, a.data)
    out = _node(y, (a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad * _sigmoid_np(a.data))

    out._backward = _bw
    return out


def clip01(a) -> Tensor:
    """Clamp to [0,1]; gradient passes only where the input is inside the box."""
    a = as_tensor(a)
    inside = (a.data >= 0.0) & (a.data <= 1.0)
    out = _node(np.clip(a.data, 0.0, 1.0), (a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad * inside)

    out._backward = _bw
    return out


def mean(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.asarray(np.mean(a.data)), (a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(np.full_like(a.data, float(out.grad) / a.data.size))

    out._backward = _bw
    return out


def sum_squares(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.asarray(np.sum(a.data * a.data)), (a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(2.0 * a.data * float(out.grad))

    out._backward = _bw
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: needs at least one operand")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat: 1-d operands only, got shape {p.shape}")
    out = _node(np.concatenate([p.data for p in parts]), tuple(parts))
    offsets = np.cumsum([0] + [p.data.size for p in parts])

    def _bw():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(out.grad[lo:hi])

    out._backward = _bw
    return out


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Pack scalar (0-d or single-element) tensors into one 1-d vector."""
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        if p.data.size != 1:
            raise ShapeError(f"stack: scalar operands only, got shape {p.shape}")
    out = _node(np.array([float(p.data.reshape(())) for p in parts]), tuple(parts))

    def _bw():
        for i, p in enumerate(parts):
            if p.requires_grad:
                p.accumulate(np.full_like(p.data, out.grad[i]))

    out._backward = _bw
    return out


def slice1d(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"slice1d: 1-d input only, got shape {a.shape}")
    if not (0 <= start <= stop <= a.data.size):
        raise ShapeError(f"slice1d: [{start}:{stop}] out of range for size {a.data.size}")
    out = _node(a.data[start:stop].copy(), (a,))

    def _bw():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[start:stop] = out.grad
            a.accumulate(g)

    out._backward = _bw
    return out


def row(a, index: int) -> Tensor:
    """Select one row of a 2-d tensor (embedding-table lookup)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row: 2-d input only, got shape {a.shape}")
    if not (0 <= index < a.shape[0]):
        raise ShapeError(f"row: index {index} out of range for {a.shape[0]} rows")
    out = _node(a.data[index].copy(), (a,))

    def _bw():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[index] = out.grad
            a.accumulate(g)

    out._backward = _bw
    return out


def topo_order(loss: Tensor) -> list[Tensor]:
    """Reverse-topological schedule over everything reachable from ``loss``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it, from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo_order(loss)):
        node._backward()
