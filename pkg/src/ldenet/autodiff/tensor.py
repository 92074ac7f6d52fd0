"""Dense tensor with reverse-mode automatic differentiation.

Tensors wrap a numpy array. Every differentiable operation returns a new
tensor that remembers its parents and a closure mapping the output adjoint
to the adjoints of its inputs. ``backward`` orders the recorded graph
topologically (a :class:`Tape`) and replays the closures in reverse.

Gradients are written only to leaf tensors (tensors created by the user
with ``requires_grad=True``); calling ``backward`` twice without zeroing
accumulates into ``.grad``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""

    def __init__(self, op: str, message: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: {message} (shapes: {detail})")


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, message: str = "non-finite values produced"):
        self.op = op
        super().__init__(f"{op}: {message}")


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _anomaly_enabled() -> bool:
    return getattr(_state, "detect_anomaly", False)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly() -> Iterator[None]:
    """Check every operation output for NaN/Inf and raise naming the operation."""
    prev = _anomaly_enabled()
    _state.detect_anomaly = True
    try:
        yield
    finally:
        _state.detect_anomaly = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode AD.

    Layout convention across the package is ``height x width x channels``
    with an optional leading batch axis.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -- operators (implementations live in ops) --------------------------
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

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op's output, recording the graph edge when any parent needs grad."""
    if _anomaly_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """Operations reachable from an output, in topological order.

    Every node appears after all nodes producing its inputs; replaying the
    list backwards visits each operation exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> Tape:
    """Populate ``.grad`` of every leaf tensor that ``loss`` depends on."""
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError("backward", "loss must be a scalar", loss.shape)
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return Tape([])
    tape = Tape.from_output(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg
    return tape


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))
