"""Tensor container and reverse-mode differentiation.

A :class:`Tensor` is a node in a dynamically built DAG. Ops evaluate eagerly and,
when any input requires a gradient, record their parents together with a
backward rule mapping the output gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class StateError(RuntimeError):
    """Raised when the graph is queried in an invalid state."""


class _GradMode:
    enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = _GradMode.enabled
    _GradMode.enabled = False
    try:
        yield
    finally:
        _GradMode.enabled = prev


class _Degeneracy:
    count = 0


def degeneracy_count() -> int:
    """Number of zero-norm vectors met by normalizing ops since the last reset."""
    return _Degeneracy.count


def reset_degeneracy() -> None:
    _Degeneracy.count = 0


def flag_degenerate(n: int) -> None:
    _Degeneracy.count += int(n)


class Tensor:
    """Dense array plus the bookkeeping needed for backprop.

    ``data`` is a numpy array (float32 in production, float64 for gradient
    checks). Tensors are treated as immutable once created.
    """

    __slots__ = ("data", "requires_grad", "parents", "op", "backward_fn", "grad", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        op: str = "leaf",
        backward_fn: Callable | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # 4 data axes plus batch, plus one transient axis for sub-volume splits
        if arr.ndim > 6:
            raise ShapeError(f"tensors hold at most 6 axes, got {arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self) -> None:
        backprop(self)

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.mul(as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def make_node(data: np.ndarray, parents: Iterable[Tensor], op: str, backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording the graph edge only when it is needed."""
    parents = tuple(parents)
    needs = _GradMode.enabled and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, parents=parents, op=op, backward_fn=backward_fn)
    return Tensor(data, op=op)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` receive ``.grad``. If ``wrt`` is given,
    their gradients are also returned (zeros for tensors the loss ignores).
    """
    if loss.data is None:
        raise StateError("loss has no forward value")
    if loss.data.size != 1:
        raise ShapeError(f"backprop needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node.backward_fn is None:
                raise StateError(f"node {node.op} has parents but no backward rule")
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {p.shape}")
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    if wrt is None:
        return None
    out = []
    for t in wrt:
        out.append(t.grad if t.grad is not None else np.zeros_like(t.data))
    return out


def grad_of(t: Tensor) -> np.ndarray:
    """Gradient stored on a leaf; raises if no backward sweep has reached it."""
    if t.grad is None:
        raise StateError("gradient requested before backprop reached this tensor")
    return t.grad


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
