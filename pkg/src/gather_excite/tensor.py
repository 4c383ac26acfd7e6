"""Dense tensors with reverse-mode gradient propagation.

A :class:`Tensor` wraps a numpy array. Operations in
:mod:`gather_excite.functional` record, for every output that depends on a
tensor requiring gradients, the parent tensors and a closure mapping the
output gradient to parent gradients. :func:`backward` linearises that graph
into a :class:`Tape` and replays it in reverse.

Production tensors are 32-bit. Gradient checking runs the same kernels on
64-bit tensors; kernels preserve the floating dtype of their inputs.
"""

from __future__ import annotations

import contextlib
import os
import threading

import numpy as np

from .exceptions import DimensionError, StateError, UsageError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def debug_enabled():
    return os.environ.get("GE_DEBUG", "") not in ("", "0")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A dense array that may take part in gradient propagation.

    Most tensors in this package are rank 4, ``(N, C, H, W)``; linear layers
    use a rank-2 ``(N, F)`` view.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    @property
    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; kernels live in functional
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    def __mul__(self, other):
        from . import functional as F

        return F.hadamard(self, other)

    def sum(self):
        from . import functional as F

        return F.sum(self)


class Parameter(Tensor):
    """A learnable tensor with a hierarchical registry name."""

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def make_result(data, parents, backward_fn):
    """Wrap a kernel output and record it on the graph when needed.

    ``backward_fn(grad)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if debug_enabled() and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a forward kernel")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """Ordered record of the operations reachable from one output.

    Records are in topological order: every operation comes after the
    operations that produced its inputs.
    """

    def __init__(self, records):
        self.records = records

    @classmethod
    def from_output(cls, output):
        order = []
        seen = set()
        stack = [(output, False)]
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
        return cls(order)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def backward(loss, grad=None):
    """Propagate gradients from a scalar ``loss`` into every reachable leaf.

    Gradients accumulate into ``.grad`` of leaf tensors. The graph below
    ``loss`` is released afterwards, so a second call on the same loss fails.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not attached to any tensor requiring gradients")
    if loss.is_leaf and loss._parents == () and getattr(loss, "_consumed", False):
        raise StateError("graph already consumed by a previous backward()")

    tape = Tape.from_output(loss)
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    grads = {id(loss): seed}
    for node in reversed(tape.records):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None
        node._consumed = True
    return tape
