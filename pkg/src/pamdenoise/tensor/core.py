"""Tensor container and the tape that records operations for reverse mode."""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Operation parameters are inconsistent (bad stride, channel ratio, ...)."""


class StateError(RuntimeError):
    """An object is not in a state that permits the requested call."""


class UsageError(ValueError):
    """API misuse, e.g. calling backward on a non-scalar."""


MAX_RANK = 4


class Tensor:
    """Real-valued float64 array of rank <= 4 with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal constructor that skips the defensive copy
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; implementations live in ops.
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


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> Optional["Tape"]:
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Ordered record of differentiable operations.

    Operations executed inside ``with Tape() as tape:`` whose inputs require
    gradients are appended in execution order, which is a valid topological
    order. Tapes are thread-local; a tape must not be shared across threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if st and st[-1] is self:
            st.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


class no_grad:
    """Suspend recording: ops inside run forward-only even if an outer tape is active."""

    def __enter__(self) -> None:
        _stack().append(None)

    def __exit__(self, *exc) -> None:
        _stack().pop()


def make_output(arr: np.ndarray, inputs: Sequence, backward_fn: Callable) -> Tensor:
    """Wrap a forward result and record it on the active tape if needed.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or None) per entry of ``inputs``.
    """
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    needs = any(t.requires_grad for t in tensors)
    tape = active_tape() if needs else None
    out = Tensor._wrap(arr, tape is not None)
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Gradients are accumulated into ``.grad`` of every leaf tensor (one not
    produced on this tape) that has ``requires_grad`` set.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.out) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
