"""Dense float tensors with a reverse-mode autodiff tape.

A :class:`Tensor` wraps a NumPy array of ``float32`` or ``float64``. Every
differentiable operation in :mod:`cetnet.ops` that sees at least one input
with ``requires_grad=True`` attaches a :class:`Node` to its output. Calling
:func:`backward` on a scalar linearises those nodes into a :class:`Tape`
(topological order) and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import UsageError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()
_generation = itertools.count(1)


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable node recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_float_array(data, dtype) -> np.ndarray:
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
            return data
        if isinstance(data, np.generic) and data.dtype in FLOAT_DTYPES:
            return np.asarray(data)
        if isinstance(data, Tensor):
            return data.data
        dtype = np.float32
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise UsageError(f"unsupported precision {dtype}; use float32 or float64")
    if isinstance(data, Tensor):
        data = data.data
    return np.asarray(np.asarray(data, dtype=dtype), order="C")


class Node:
    """One recorded operation: its inputs and the local backward rule.

    ``backward_fn`` maps the output gradient to a tuple with one entry per
    input (``None`` where no gradient flows).
    """

    __slots__ = ("inputs", "backward_fn", "op", "consumed")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable, op: str):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.op = op
        self.consumed = False


class Tensor:
    """A float array plus optional gradient bookkeeping."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, shape, dtype=np.float32, requires_grad=False):
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, dtype=np.float32, requires_grad=False):
        return cls(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def randn(cls, *shape, rng=None, dtype=np.float32, requires_grad=False, scale=1.0):
        rng = np.random.default_rng() if rng is None else rng
        return cls((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=requires_grad)

    # -- properties -------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar (implemented in cetnet.ops) -----------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise UsageError("tensor / tensor is not supported; divide by a Python scalar")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op's output, attaching a node only if some input needs grad."""
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, backward_fn, op)
    return out


class Tape:
    """Topologically ordered list of the nodes reachable from a loss."""

    def __init__(self, tensors: list, generation: int):
        self.tensors = tensors
        self.generation = generation

    @property
    def nodes(self):
        return [t.node for t in self.tensors]

    def __len__(self):
        return len(self.tensors)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in reversed(t.node.inputs):
                if inp.node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order, next(_generation))


def _accumulate(store: Optional[np.ndarray], g: np.ndarray) -> np.ndarray:
    return g.copy() if store is None else store + g


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> Tape:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Gradients are added to any existing ``.grad`` buffers. Leaves listed in
    ``inputs`` that the loss does not depend on receive a zero gradient.
    The recorded graph is consumed: a second call raises :class:`UsageError`.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tensor with requires_grad=True")
        loss.grad = _accumulate(loss.grad, np.ones_like(loss.data))
        tape = Tape([], next(_generation))
    else:
        if loss.node.consumed:
            raise UsageError("backward() called twice on the same graph; run the forward pass again")
        tape = Tape.from_loss(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for t in reversed(tape.tensors):
            g = grads.pop(id(t), None)
            node = t.node
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise AssertionError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
                if inp.node is not None:
                    grads[id(inp)] = _accumulate(grads.get(id(inp)), ig)
                else:
                    inp.grad = _accumulate(inp.grad, ig.astype(inp.dtype, copy=False))
        for t in tape.tensors:
            t.node.consumed = True
            t.node.backward_fn = None
    if inputs is not None:
        for leaf in inputs:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    return tape
