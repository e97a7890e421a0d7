"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built dynamically: every operation returns a new ``Tensor``
holding its value, its parents, and a closure that routes the incoming
adjoint to those parents. ``backward`` walks the graph once in reverse
topological order, so gradient accumulation order is fixed by construction
order and repeated runs are bitwise identical.

Only the primitives needed by the classifier and the distillation losses
are implemented: add / mul / div (with numpy broadcasting), 2-D matmul,
relu, exp, log, clamp_min, reshape and axis sums. Softmax is composed from
these with a detached row-max shift for stability.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array node in the reverse-mode graph.

    External construction validates finiteness; intermediate op results are
    trusted and checked only when a loss value is extracted.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite entries in tensor '{op}'", layer=op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @classmethod
    def _op_result(
        cls,
        data: Array,
        parents: Sequence["Tensor"],
        backward: Callable[[Array], None],
        op: str,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.op = op
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.requires_grad})"

    def _accum(self, g: Array) -> None:
        if self.requires_grad:
            self.grad = g if self.grad is None else self.grad + g

    # -- arithmetic ----------------------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=np.float64), op="const")

    def __add__(self, other) -> "Tensor":
        a, b = self, self._coerce(other)
        out_data = a.data + b.data

        def bw(g: Array) -> None:
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        return Tensor._op_result(out_data, (a, b), bw, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def bw(g: Array) -> None:
            a._accum(-g)

        return Tensor._op_result(-a.data, (a,), bw, "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        a, b = self, self._coerce(other)
        out_data = a.data * b.data

        def bw(g: Array) -> None:
            a._accum(_unbroadcast(g * b.data, a.shape))
            b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._op_result(out_data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        a, b = self, self._coerce(other)
        out_data = a.data / b.data

        def bw(g: Array) -> None:
            a._accum(_unbroadcast(g / b.data, a.shape))
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._op_result(out_data, (a, b), bw, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __matmul__(self, other) -> "Tensor":
        a, b = self, self._coerce(other)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        out_data = a.data @ b.data

        def bw(g: Array) -> None:
            a._accum(g @ b.data.T)
            b._accum(a.data.T @ g)

        return Tensor._op_result(out_data, (a, b), bw, "matmul")

    # -- nonlinearities and reductions ----------------------------------------

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0.0

        def bw(g: Array) -> None:
            a._accum(g * mask)

        return Tensor._op_result(np.maximum(a.data, 0.0), (a,), bw, "relu")

    def exp(self) -> "Tensor":
        a = self
        with np.errstate(over="ignore"):
            out_data = np.exp(a.data)

        def bw(g: Array) -> None:
            a._accum(g * out_data)

        return Tensor._op_result(out_data, (a,), bw, "exp")

    def log(self) -> "Tensor":
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = np.log(a.data)

        def bw(g: Array) -> None:
            a._accum(g / a.data)

        return Tensor._op_result(out_data, (a,), bw, "log")

    def clamp_min(self, lo: float) -> "Tensor":
        a = self
        mask = a.data > lo

        def bw(g: Array) -> None:
            a._accum(g * mask)

        return Tensor._op_result(np.maximum(a.data, lo), (a,), bw, "clamp_min")

    def reshape(self, *shape: int) -> "Tensor":
        a = self
        out_data = a.data.reshape(*shape)

        def bw(g: Array) -> None:
            a._accum(g.reshape(a.shape))

        return Tensor._op_result(out_data, (a,), bw, "reshape")

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g: Array) -> None:
            g_arr = np.asarray(g)
            if axis is not None and not keepdims:
                g_arr = np.expand_dims(g_arr, axis)
            a._accum(np.broadcast_to(g_arr, a.shape))

        return Tensor._op_result(out_data, (a,), bw, "sum")

    def mean(self, axis: int | None = None) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)


def detached_row_max(t: Tensor) -> Array:
    """Row maximum as a plain array (stop-gradient shift for softmax)."""
    return np.max(t.data, axis=-1, keepdims=True)


def softmax_rows(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis, max-shifted for stability.

    The shift is a detached constant; softmax is invariant to it so the
    gradient is unaffected.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = logits * (1.0 / temperature)
    e = (z - detached_row_max(z)).exp()
    return e / e.sum(axis=-1, keepdims=True)


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes of the graph below ``root`` in construction (forward) order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    order = topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def first_nonfinite_op(root: Tensor) -> str | None:
    """Name of the earliest op in the graph whose value is non-finite."""
    for node in topo_order(root):
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None
