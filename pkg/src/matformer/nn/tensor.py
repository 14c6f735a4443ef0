"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` owns a contiguous ``float64`` numpy array. Operations in
:mod:`matformer.nn.ops` build the graph implicitly by recording parents and a
backward closure on their outputs; :meth:`Tensor.backward` walks that graph in
reverse topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from matformer.errors import DimensionError, NumericError

MAX_AXES = 4

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def check_finite(arr: np.ndarray, where: str) -> None:
    # the sum is a cheap screen; only confirm element-wise when it trips
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """A node in the autodiff graph.

    Attributes:
        data: The value, a float64 array with at most four axes.
        grad: Accumulated gradient (same shape as ``data``) or ``None``.
        requires_grad: Whether gradients flow into this tensor.
        grad_rows: Number of leading rows of ``grad`` that were written since
            the last :meth:`zero_grad`. Prefix slices only touch a prefix, which
            lets the optimizer leave the remaining rows (and their moments)
            untouched.
    """

    __slots__ = ("data", "grad", "requires_grad", "grad_rows", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise DimensionError(f"tensors support at most {MAX_AXES} axes, got shape {arr.shape}")
        check_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.grad_rows = 0
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = _op

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None
        self.grad_rows = 0

    def _accum(self, g: np.ndarray, fresh: bool = False) -> None:
        """Add ``g`` into ``self.grad``.

        ``fresh`` promises that nothing else references ``g``, so it can be
        adopted without a copy.
        """
        if self.grad is None:
            if fresh and g.shape == self.shape and g.flags.writeable:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g
        self.grad_rows = self.shape[0] if self.ndim else 1

    def _accum_rows(self, g: np.ndarray, rows: int) -> None:
        """Accumulate ``g`` into the first ``rows`` rows only."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad[:rows] += g
        self.grad_rows = max(self.grad_rows, rows)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor.

        Args:
            grad: Seed gradient. Defaults to ones, which is what a scalar loss
                wants.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        order = _topological_order(self)
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if seed.shape != self.shape:
            raise DimensionError(f"seed gradient shape {seed.shape} != tensor shape {self.shape}")
        self._accum(seed)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # interior gradients are not needed once propagated
            node.grad = None
            node._backward = None
            node._parents = ()


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that requires grad, stored C-contiguous."""
    return Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True, name=name)
