"""Dense tensors and the define-by-run differentiation tape."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..exceptions import NonFiniteValue, NotScalarLoss, ShapeMismatch

MAX_RANK = 4
DEFAULT_DTYPE = np.float64

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


class BranchRecorder:
    """Collects the branch taken by every piecewise op (relu masks, arg-extrema) in a forward pass."""

    def __init__(self):
        self.branches = []

    def __enter__(self):
        _state.recorder = self
        return self

    def __exit__(self, *exc):
        _state.recorder = None

    def signature(self) -> bytes:
        return b"".join(np.ascontiguousarray(b).tobytes() for b in self.branches)


def record_branch(choice: np.ndarray) -> None:
    rec = getattr(_state, "recorder", None)
    if rec is not None:
        rec.branches.append(choice)


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable rank-<=4 float array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatch(f"rank {arr.ndim} exceeds {MAX_RANK}")
        if 0 in arr.shape:
            raise ShapeMismatch(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the real work lives in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __pow__(self, exponent):
        from . import functional as F
        return F.pow(self, exponent)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)


class Parameter(Tensor):
    """Trainable tensor. ``data`` is updated in place by optimizers."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE), True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; primitives evaluated inside the block append
    nodes whenever one of their inputs requires a gradient.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, node: Node):
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def make_op(op: str, value: np.ndarray, inputs: Sequence, backward_fn) -> Tensor:
    """Wrap a computed value as a tensor, recording a node if needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input; inputs that are not tensors receive no gradient.
    """
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue(f"{op} produced a non-finite value")
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep over ``tape`` seeded at the scalar ``loss``.

    Returns a mapping tensor -> gradient array for every tracked tensor the
    loss depends on, and accumulates into ``Parameter.grad`` of reachable
    parameters. Unreachable parameters are left untouched.
    """
    if loss.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads: dict = {loss: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                gi = gi.reshape(t.shape)
            prev = grads.get(t)
            grads[t] = gi if prev is None else prev + gi
    for t, g in grads.items():
        if isinstance(t, Parameter):
            t.grad = t.grad + g
    return grads


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))
