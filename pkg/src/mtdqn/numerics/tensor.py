"""Dense fp64 tensors and the tape that records differentiable operations."""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from mtdqn.errors import ContractError, NonFiniteError, TapeStateError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


class Tensor:
    """Row-major float64 array with an optional gradient slot.

    Tensors are plain values; differentiation happens only for operations
    executed while a :class:`Tape` is active.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name or ''} contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @classmethod
    def constant(cls, arr: np.ndarray) -> "Tensor":
        """Wrap a finite float64 array without copying or checking it."""
        return cls._wrap(arr, False)

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the named functions in ``ops`` are the primary API
    def __add__(self, other):
        from mtdqn.numerics import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from mtdqn.numerics import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from mtdqn.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from mtdqn.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from mtdqn.numerics import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from mtdqn.numerics import ops
        return ops.mul(other, self)

    def __neg__(self):
        from mtdqn.numerics import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from mtdqn.numerics import ops
        return ops.matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations whose inputs require gradients are
    appended in execution order, so the record is topologically sorted by
    construction. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeStateError("tape already consumed by a backward pass")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self._consumed:
            raise TapeStateError("cannot record onto a consumed tape")
        self._nodes.append(_Node(out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` (accumulating) on every leaf that requires it."""
        if self._consumed:
            raise TapeStateError("tape replay after backward is not allowed")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced on this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self._nodes.clear()


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Run reverse-mode differentiation of ``loss`` over ``tape``."""
    tape.backward(loss)


def make_result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op's output, checking finiteness and recording it if needed."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    tape = active_tape()
    # outside a tape every result is a constant
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
