"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block, or passed explicitly as ``tape=``). Outside any tape they
simply compute values. Only row-wise bias addition broadcasts; everything
else demands exact shapes so that each backward rule stays easy to audit.

Example::

    with Tape() as tape:
        y = relu(add_bias(matmul(x, w), b))
        loss = sum_all(y)
    tape.backward(loss)
    w.grad  # dloss/dw
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "autransfer_active_tape", default=None
)


class Tensor:
    """Row-major float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64).reshape(self.shape)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, which is a valid topological
    order; :meth:`backward` walks them in reverse.
    """

    nodes: list[_Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, output: Tensor, inputs: Sequence[Tensor], rule) -> None:
        self.nodes.append(_Node(output, tuple(inputs), rule))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _tape_for(tape: Tape | None) -> Tape | None:
    return tape if tape is not None else _ACTIVE_TAPE.get()


def _emit(data: np.ndarray, inputs: Sequence[Tensor], rule, tape: Tape | None) -> Tensor:
    out = Tensor(data)
    t = _tape_for(tape)
    if t is not None and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        t.record(out, inputs, rule)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def rule(g):
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), rule, tape)


def add_bias(x: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {b.shape} do not align")

    def rule(g):
        return g, g.sum(axis=0)

    return _emit(x.data + b.data[None, :], (x, b), rule, tape)


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), tape)


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A), tape)


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), tape)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Sign-branched logistic: never exponentiates a positive number."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    s = stable_sigmoid(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),), tape)


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(x: Tensor, tape: Tape | None = None) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows: expected a non-empty 2-d tensor, got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (x,), rule, tape)


def log_softmax_rows(x: Tensor, tape: Tape | None = None) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"log_softmax_rows: expected a non-empty 2-d tensor, got {x.shape}")
    ls = log_softmax_array(x.data)
    s = np.exp(ls)

    def rule(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _emit(ls, (x,), rule, tape)


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), tape)


def mean_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    shape, n = x.shape, x.size
    return _emit(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), tape)


def custom_op(value: np.ndarray, inputs: Sequence[Tensor], rule, tape: Tape | None = None) -> Tensor:
    """Record an op whose forward value and backward rule are computed elsewhere.

    ``rule(g)`` must return one gradient (or None) per input. Used by the
    fused loss functions.
    """
    return _emit(np.asarray(value, dtype=np.float64), tuple(inputs), rule, tape)


# ---------------------------------------------------------------------------
# gradient plumbing
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf tensor.

    Leaves are tensors with ``requires_grad`` that no recorded node produced,
    i.e. parameters and inputs. Gradients add onto existing buffers, so call
    :func:`zero_grad` between steps.
    """
    if loss.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise ContractError("loss was not produced on this tape")
    seed = np.ones(loss.shape)
    if id(loss) not in produced:
        loss.accumulate(seed)
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
            key = id(inp)
            if key in produced:
                pending[key] = pending[key] + gi if key in pending else gi
            else:
                inp.accumulate(gi)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad = np.zeros_like(p.data)
