"""Dense tensors that record a reverse-mode differentiation graph.

Every differentiable operation produces a new :class:`Tensor` holding a
reference to its parents and a closure mapping the upstream gradient to
one gradient per parent. :func:`backward` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """The differentiation graph cannot be traversed as requested."""


class NonFiniteError(FloatingPointError):
    """Debug mode found NaN or Inf in an operation output."""


_state = {"grad": True, "debug": False}


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference only)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def set_debug(flag: bool) -> None:
    """Toggle finite-value checks on every op output and model invariants."""
    _state["debug"] = bool(flag)


def is_debug() -> bool:
    return _state["debug"]


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    prev = _state["debug"]
    _state["debug"] = flag
    try:
        yield
    finally:
        _state["debug"] = prev


class Tensor:
    """N-dimensional float array with an optional gradient.

    ``data`` is a contiguous numpy array (row-major); ``grad`` has the same
    shape once populated. Leaf tensors created by the user keep the
    gradient after :func:`backward`; intermediate tensors do not.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; implementations live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        from . import ops
        return ops.swapaxes(self, a, b)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op output, attaching graph links only when a parent needs grad."""
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return out


@dataclass
class Node:
    op: str
    tensor: Tensor
    inputs: tuple[int, ...] = field(default_factory=tuple)


@dataclass
class Graph:
    """Topologically ordered view of the operations that produced a tensor.

    ``nodes[i].inputs`` index earlier entries of ``nodes``; the output is
    the last node.
    """

    nodes: list[Node]

    @classmethod
    def trace(cls, output: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        pos = {id(t): i for i, t in enumerate(order)}
        nodes = [Node(t.op, t, tuple(pos[id(p)] for p in t._parents if id(p) in pos)) for t in order]
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``inputs`` lists leaves that must end up with a gradient even when the
    loss does not depend on them; they receive zeros.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if inputs is not None:
        for t in inputs:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        t = node.tensor
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            if t.grad is None:
                t.grad = np.array(g, dtype=t.dtype, copy=True)
            else:
                t.grad += g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"{t.op} backward produced grad {pg.shape} for input {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))
