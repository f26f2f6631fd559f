"""Dense float64 tensors with a reverse-mode autodiff tape.

A Tensor either is a leaf (parameters, inputs) or was produced by an op in
ops.py, in which case it carries its parents and a vector-Jacobian closure.
Graphs are ephemeral: every forward call builds a fresh DAG, and backward()
walks it exactly once in reverse topological order.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import NonFiniteError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: output contains NaN or Inf")


class Tensor:
    """A dense float64 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        ensure_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def from_op(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    """Wrap an op result, recording the tape edge when gradients are live."""
    ensure_finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._vjp = vjp
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    return t


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the reachable differentiable graph."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain: tuple[Tensor, ...] = ()) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar loss.

    Returns a table mapping every requires_grad leaf reachable from the loss
    to its gradient array. Tensors listed in `retain` (typically non-leaf
    activations, e.g. for CAM extraction) are included as well. No tensor is
    mutated.
    """
    if loss.data.ndim != 0:
        raise UsageError("backward requires a scalar loss node")
    retain_ids = {id(t) for t in retain}
    order = _topo_order(loss)
    grads: dict[int, list] = {id(loss): [loss, np.ones((), dtype=np.float64)]}
    table: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        entry = grads.pop(id(node), None)
        if entry is None:
            continue
        g = entry[1]
        if (node.requires_grad and node.is_leaf()) or id(node) in retain_ids:
            table[node] = g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            slot = grads.get(id(parent))
            if slot is None:
                grads[id(parent)] = [parent, pg]
            else:
                slot[1] = slot[1] + pg
    return table
