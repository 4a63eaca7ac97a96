"""Dense float64 tensors with tape-based reverse-mode differentiation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """An operation was configured with parameters that cannot produce a valid result."""


class Tensor:
    """A float64 array that can record how it was produced.

    Tensors built by the functions in this package keep a reference to their
    inputs and a closure mapping the output gradient to input gradients.  The
    forward value is never mutated by the graph machinery; only leaf tensors
    (parameters) are updated in place by optimizers.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_fn", "id")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar; the real work lives in the module-level functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result; only records the graph edge when some input needs a gradient."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, op=op, parents=parents, backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    input_ids: tuple
    output_id: int
    node: Tensor = field(repr=False)


class Tape:
    """Topologically ordered record of the primitive applications behind a root."""

    def __init__(self, entries: list[TapeEntry]):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; recursion depth would otherwise scale with graph length
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.id not in seen and p.requires_grad:
                    stack.append((p, False))
        entries = [
            TapeEntry(n.op, tuple(p.id for p in n.parents), n.id, n)
            for n in order
            if not n.is_leaf
        ]
        return cls(entries)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(root: Tensor) -> Tape:
    """Propagate d(root)/d(leaf) into ``leaf.grad`` for every differentiable leaf.

    Leaf gradients are added to any existing ``grad`` buffer, so callers that
    reuse parameters across steps must clear them first.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not depend on any tensor requiring grad")
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for entry in reversed(tape.entries):
        node = entry.node
        g = grads.pop(node.id, None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(pg, p.shape)
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    for entry in tape.entries:
        for p in entry.node.parents:
            if p.is_leaf and p.id in grads:
                g = grads.pop(p.id)
                p.grad = g.copy() if p.grad is None else p.grad + g
    if root.is_leaf and root.id in grads:
        root.grad = grads.pop(root.id)
    return tape


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_node(out, "div", (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(t.data * c, "scale", (t,), lambda g: (g * c,))


def power(t: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    x = t.data
    return make_node(x**e, "power", (t,), lambda g: (g * e * x ** (e - 1.0),))


def log(t: Tensor) -> Tensor:
    x = t.data
    return make_node(np.log(x), "log", (t,), lambda g: (g / x,))


def softplus(t: Tensor) -> Tensor:
    x = t.data
    out = np.logaddexp(0.0, x)
    return make_node(out, "softplus", (t,), lambda g: (g * _sigmoid(x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return make_node(np.where(mask, t.data, 0.0), "relu", (t,), lambda g: (g * mask,))


def tsum(t: Tensor, axis=None) -> Tensor:
    shape = t.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_node(np.asarray(t.data.sum(axis=axis)), "sum", (t,), bw)


def mean(t: Tensor, axis=None) -> Tensor:
    n = t.data.size if axis is None else t.shape[axis]
    return scale(tsum(t, axis), 1.0 / n)


def reshape(t: Tensor, shape: tuple) -> Tensor:
    old = t.shape
    return make_node(t.data.reshape(shape), "reshape", (t,), lambda g: (g.reshape(old),))


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {t.shape}")
    return make_node(t.data.T.copy(), "transpose", (t,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty list")
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, "concat", tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    return make_node(A @ B, "matmul", (a, b), lambda g: (g @ B.T, A.T @ g))
