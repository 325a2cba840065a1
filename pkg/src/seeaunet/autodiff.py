"""Tensor type and the reverse-mode differentiation engine.

A :class:`Tensor` wraps a float32/float64 numpy array. Every tensor produced by an
operation while gradient recording is enabled is also a graph node: it keeps a
reference to its inputs and a closure mapping the upstream gradient to one
gradient per input. :func:`backward` sweeps the graph in reverse creation order,
which is a valid reverse topological order because inputs are always created
before the nodes that consume them.
"""
from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ShapeError, ValidationError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_ids = itertools.count()
_grad_enabled = True
_debug = bool(os.environ.get("SEEA_DEBUG"))

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense float tensor and autodiff graph node.

    Args:
        data: array-like values. Float32/float64 arrays keep their dtype, anything
            else is converted to ``dtype`` (float64 when not given).
        requires_grad: mark a leaf as needing a gradient after :func:`backward`.
        dtype: optional target dtype, ``float32`` or ``float64``.
        name: optional label, used for parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "inputs", "_backward", "id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ValidationError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.inputs: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

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

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar; the real work is in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _lift(other, self))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_lift(other, self), self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, _lift(-1.0, self))

    def sum(self):
        from . import ops

        return ops.sum_all(self)

    def mean(self):
        from . import ops

        return ops.mean_all(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        if dtype is not None and value.dtype != np.dtype(dtype):
            return Tensor(value.data, dtype=dtype)
        return value
    return Tensor(value, dtype=dtype)


def make_node(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    """Wrap an op's result, recording it in the graph when any input needs a gradient."""
    out = Tensor(data)
    out.op = op
    if _debug and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"non-finite output from {op} on finite inputs")
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.inputs = tuple(inputs)
        out._backward = backward_fn
    return out


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _collect(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        nodes.append(node)
        stack.extend(node.inputs)
    nodes.sort(key=lambda t: t.id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every node of ``loss``'s graph that requires a gradient.

    Gradients are assigned, not accumulated across calls: each call starts from
    a fresh sweep. Contributions arriving at a fan-out node are summed in
    reverse creation order of their consumers, so the result is deterministic.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValidationError("loss does not depend on any tensor requiring a gradient")
    nodes = _collect(loss)
    pending = {loss.id: np.ones_like(loss.data)}
    for node in nodes:
        grad = pending.pop(node.id, None)
        if grad is None:
            # unreachable from the loss through differentiable paths
            grad = np.zeros_like(node.data)
        node.grad = grad
        if node._backward is None:
            continue
        input_grads = node._backward(grad)
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.data.shape:
                raise ShapeError(f"{node.op} backward produced {g.shape} for input of shape {inp.shape}")
            prev = pending.get(inp.id)
            pending[inp.id] = g if prev is None else prev + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
