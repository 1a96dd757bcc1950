"""Reverse-mode automatic differentiation on dense numpy arrays.

A :class:`Tensor` wraps a float32 or float64 ndarray. Operations (see
:mod:`crackseg.ops`) record their inputs and a backward closure on the
result, forming an implicit computation graph. :func:`backward` walks
that graph once, in reverse topological order, and writes gradients
into every participating tensor that has ``requires_grad`` set.

Design rules enforced here:

* a gradient buffer always has the same shape and dtype as its tensor;
* calling :func:`backward` twice on the same graph, or calling it while
  a leaf still carries a gradient from an earlier pass, raises instead
  of silently accumulating;
* graph bookkeeping is freed after the sweep so saved activations do
  not outlive the step.

Tensors are plain values: nothing here is thread-local except the
module-wide gradient-recording switch, which is only toggled around
inference via :func:`no_grad`.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientStateError",
    "backward",
    "no_grad",
    "grad_enabled",
    "add",
    "mul",
    "sum_all",
]

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Single-element list so closures/context managers can flip it in place.
_grad_mode = [True]


def grad_enabled() -> bool:
    """True while operations should record the computation graph."""
    return _grad_mode[0]


@contextmanager
def no_grad():
    """Disable graph recording inside the ``with`` block (inference mode)."""
    previous = _grad_mode[0]
    _grad_mode[0] = False
    try:
        yield
    finally:
        _grad_mode[0] = previous


class GradientStateError(RuntimeError):
    """Backward called on a consumed graph or over stale gradients."""


class Tensor:
    """Dense N-dimensional array with optional gradient tracking.

    ``data`` is row-major float32 by default; float64 is kept as-is so
    gradient-check tests can run in double precision. Integer or other
    inputs are converted to float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- convenience math (enough for tests and loss plumbing) ---------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def backward(self) -> None:
        backward(self)


def make_op_result(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an op's output, recording the graph edge when grad mode is on.

    ``backward_fn`` receives the output gradient and must return one
    freshly owned array (or None) per parent, in parent order.
    """
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_mode[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of every node reachable from root."""
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    The loss must be a scalar (0-d). Each graph node is visited exactly
    once; fan-out contributions are accumulated before a node's own
    backward closure runs. The graph is freed afterwards, so a second
    call on the same loss raises :class:`GradientStateError`, as does a
    pass that would overwrite a gradient left over from a previous step
    (clear gradients between steps, e.g. via ``Adam.zero_grad``).
    """
    if not isinstance(loss, Tensor):
        raise TypeError(f"backward expects a Tensor, got {type(loss).__name__}")
    if loss.data.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradientStateError("backward already called on this graph")

    order = _toposort(loss)

    stale = [t for t in order if t.requires_grad and t.grad is not None]
    if stale:
        raise GradientStateError(
            f"{len(stale)} tensor(s) already hold gradients from a previous "
            "backward pass; clear them before calling backward again"
        )

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}

    for node in reversed(order):
        out_grad = grads.get(id(node))
        if out_grad is None or node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(out_grad)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            held = grads.get(id(parent))
            if held is None:
                grads[id(parent)] = pg
            else:
                held += pg

    for node in order:
        if node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                node.grad = g

    # Free saved activations and mark the graph consumed.
    for node in order:
        node._backward_fn = None
        node._parents = ()
    loss._consumed = True


# -- generic elementwise/reduction ops used by losses and tests --------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _check_same_shape(a, b, "add")

    def bwd(g: np.ndarray):
        return (
            g.copy() if a.requires_grad else None,
            g.copy() if b.requires_grad else None,
        )

    return make_op_result(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a same-shape tensor or a scalar."""
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")

        def bwd(g: np.ndarray):
            return (
                g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None,
            )

        return make_op_result(a.data * b.data, (a, b), bwd)

    scale = a.data.dtype.type(b)

    def bwd_scalar(g: np.ndarray):
        return (g * scale,)

    return make_op_result(a.data * scale, (a,), bwd_scalar)


def sum_all(x: Tensor) -> Tensor:
    """Reduce a tensor to the scalar sum of all its elements."""

    def bwd(g: np.ndarray):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return make_op_result(x.data.sum(), (x,), bwd)
