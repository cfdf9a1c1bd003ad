"""Dense tensor with tape-based reverse-mode differentiation."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense n-dimensional array that can accumulate gradients.

    Tensors are never mutated by operations. Every differentiable op that
    touches a ``requires_grad`` input appends a node to the active
    :class:`Tape`; :meth:`backward` replays that tape in reverse.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._is_leaf = True

    # basic properties -----------------------------------------------------
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
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self, grad: np.ndarray | None = None, tape: "Tape | None" = None,
                 retain_graph: bool = False) -> None:
        """Back-propagate from this tensor through ``tape`` (default: the active tape)."""
        (tape or current_tape()).backward(self, grad, retain_graph=retain_graph)

    # operator sugar (implemented in ops) --------------------------------
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
        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self, tuple(reversed(range(self.ndim))))

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations.

    Recording order is a topological order of the computation, so walking
    the node list backwards is a valid reverse-topological traversal.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
        out._is_leaf = False
        self.nodes.append(_Node(out, tuple(parents), backward_fn))

    def backward(self, root: Tensor, grad: np.ndarray | None = None, retain_graph: bool = False) -> list[Tensor]:
        """Propagate gradients from ``root`` to every reachable tensor.

        Returns the nodes' outputs in visiting order (reverse recording order).
        Leaf gradients accumulate across calls; non-leaf gradients are
        dropped when the tape is cleared.
        """
        if grad is None:
            if root.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {root.shape}")
            grad = np.ones(root.shape, dtype=root.dtype)
        root.grad = np.asarray(grad, dtype=root.dtype) + (root.grad if root.grad is not None else 0)
        visited = []
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            visited.append(node.out)
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"gradient shape {pg.shape} does not match tensor shape {p.shape}")
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.dtype, copy=True)
                else:
                    p.grad += pg
        if not retain_graph:
            self.clear()
        return visited

    def clear(self) -> None:
        """Drop every recorded node and free non-leaf gradients."""
        for node in self.nodes:
            node.out.grad = None
        self.nodes.clear()


_tape_stack: list[Tape] = [Tape()]
_grad_enabled = [True]


def current_tape() -> Tape:
    return _tape_stack[-1]


@contextlib.contextmanager
def use_tape(tape: Tape | None = None):
    tape = tape if tape is not None else Tape()
    _tape_stack.append(tape)
    try:
        yield tape
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad():
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record it if any parent needs a gradient."""
    parents = tuple(parents)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        current_tape().record(out, parents, backward_fn)
    return out
