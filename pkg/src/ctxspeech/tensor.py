"""Dense float64 tensors with tape-based reverse-mode gradients.

A :class:`Tensor` wraps a read-only ``numpy.ndarray`` of dtype float64.  Every
primitive in :mod:`ctxspeech.ops` records itself on the innermost active
:class:`GradTape` so that :func:`backward` can replay the graph in reverse.
``stop_gradient`` marks its output as a barrier: the tape hands it an exactly
zero gradient and nothing flows through it to its input.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(ValueError):
    """A configuration or weight set is internally inconsistent."""


class Tensor:
    __slots__ = ("data", "requires_grad", "stop_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.stop_grad = False

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.stop_grad = False
        return t

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls._wrap(np.zeros(shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the payload."""
        return np.array(self.data)

    def flat(self) -> list[float]:
        return self.data.ravel().tolist()

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice_(self, index)

    @property
    def T(self) -> "Tensor":
        from . import ops
        return ops.transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Records primitive applications while active.

    Use as a context manager; tapes nest and the innermost one records.
    A tape belongs to a single thread and a single forward/backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.barriers: set[int] = set()

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    @property
    def records(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(op id, input ids, output id) per recorded operation."""
        return [(n.op, tuple(id(t) for t in n.inputs), id(n.output)) for n in self.nodes]

    def tensors(self) -> Iterable[Tensor]:
        seen: set[int] = set()
        for node in self.nodes:
            for t in (*node.inputs, node.output):
                if id(t) not in seen:
                    seen.add(id(t))
                    yield t

    def backward(self, loss: Tensor) -> "Gradients":
        return backward(self, loss)


class Gradients(dict):
    """Mapping ``id(tensor) -> ndarray`` with tensor-keyed lookup."""

    def of(self, t: Tensor) -> np.ndarray:
        return self[id(t)]


_local = threading.local()


def _stack() -> list[GradTape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> GradTape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` and log the op on the active tape, if any."""
    out = Tensor._wrap(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None:
        tape.nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in value; a gradient barrier on the tape."""
    x = as_tensor(x)
    out = Tensor._wrap(x.data)
    out.stop_grad = True
    tape = active_tape()
    if tape is not None:
        tape.barriers.add(id(out))
        tape.nodes.append(_Node("stop_gradient", (x,), out, lambda g: (None,)))
    return out


def backward(tape: GradTape, loss: Tensor) -> Gradients:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns a gradient for every tensor the tape has seen.  Barrier tensors,
    and anything reachable from the loss only through a barrier, get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out = node.output
        g = grads.get(id(out))
        if g is None or out.stop_grad or not out.requires_grad:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad or inp.stop_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = Gradients()
    for t in tape.tensors():
        key = id(t)
        if t.stop_grad or key in tape.barriers or key not in grads:
            result[key] = np.zeros_like(t.data)
        else:
            result[key] = np.asarray(grads[key], dtype=np.float64).reshape(t.shape)
    if id(loss) not in result:
        result[id(loss)] = np.ones_like(loss.data)
    return result


class MacCounter:
    """Tally of multiply-accumulates performed by ``matmul`` while active."""

    def __init__(self):
        self.macs = 0


@contextmanager
def count_macs():
    counters = getattr(_local, "counters", None)
    if counters is None:
        counters = _local.counters = []
    counter = MacCounter()
    counters.append(counter)
    try:
        yield counter
    finally:
        counters.remove(counter)


def _add_macs(n: int) -> None:
    for c in getattr(_local, "counters", ()):
        c.macs += n
