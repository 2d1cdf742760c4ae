"""Immutable tensors and a tape for reverse-mode differentiation."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateError(ValueError):
    """Input sits on a singular case of the operation (e.g. a fully masked row)."""


class ContractError(ValueError):
    """A precondition of the call was violated."""


class DomainError(ValueError):
    """A scalar argument lies outside the admissible range."""


class Tensor:
    """Dense row-major float64 array.

    The payload is read-only once constructed; operations always return new
    tensors.  ``requires_grad`` marks leaves whose gradient is wanted.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, copy: bool = True):
        if copy:
            arr = np.array(data, dtype=np.float64, order="C")
        else:
            arr = np.asarray(data, dtype=np.float64)
            if not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Graph:
    """Tape of recorded operations in creation (hence topological) order.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended to ``nodes``.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp, op: str) -> None:
        self.nodes.append(Node(out, inputs, vjp, op))


_local = threading.local()


def _stack() -> list[Graph]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_graph() -> Graph | None:
    st = _stack()
    return st[-1] if st else None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(graph: Graph, loss: Tensor, seed: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``graph`` starting from ``loss``.

    Returns a gradient array for every leaf tensor with ``requires_grad``
    that the loss depends on.  ``loss`` must hold a single element unless an
    explicit cotangent ``seed`` of the same shape is supplied.
    """
    if seed is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones(loss.shape)
    elif np.shape(seed) != loss.shape:
        raise ContractError(f"seed shape {np.shape(seed)} != output shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
    produced: set[int] = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=np.float64), t.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            leaves[key] = t
    out: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        if key in produced or key not in leaves:
            continue
        out[leaves[key]] = g
    if id(loss) in grads and loss.requires_grad and id(loss) not in produced:
        out[loss] = grads[id(loss)]
    return out
