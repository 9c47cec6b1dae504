"""Dense double-precision tensors with a reverse-mode tape.

Every differentiable op lives in :mod:`stimpute.diffcore.ops`; this module only
holds the node type, grad-mode switches and the backward sweep.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested op."""


class NumericError(FloatingPointError):
    """A non-finite value entered or left an op."""


class TapeError(RuntimeError):
    """Backward was requested on something without a recorded tape."""


_GRAD_ENABLED = True
_CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle per-op finiteness checks; the trainer switches them off for speed."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def checks_enabled() -> bool:
    return _CHECK_FINITE


class Tensor:
    """A node in the computation graph.

    ``data`` is always a C-contiguous float64 ndarray. Leaves created by the
    user carry ``requires_grad=True`` when they are parameters; intermediate
    nodes keep references to their parents and a closure mapping the output
    gradient to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple["Tensor", ...] = (), backward_fn: Callable | None = None,
                 op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.dims}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}, op={self.op}{label})"

    # Operator sugar; the implementations live in ops.
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording it on the tape only when a parent needs grads."""
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents),
                      backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map ``id(leaf) -> gradient`` and also stores each gradient on
    ``leaf.grad``. Leaves listed in ``params`` that the loss does not depend on
    receive zeros of matching dims.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        if params is None:
            raise TapeError("loss has no recorded tape")
        grads = {}
        for p in params:
            p.grad = np.zeros_like(p.data)
            grads[id(p)] = p.grad
        return grads
    order = _topological(loss)
    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[id(node)] = g
            node.grad = g
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in acc:
                acc[key] = acc[key] + pg
            else:
                acc[key] = pg
    if params is not None:
        for p in params:
            if id(p) not in leaves:
                p.grad = np.zeros_like(p.data)
                leaves[id(p)] = p.grad
    return leaves
