"""Dense NCHW tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable op creates its
output through :func:`make_result`, which links the output to its inputs and a
backward closure. :func:`backward` linearises that graph into a :class:`Tape`
(topological order) and walks it in reverse, accumulating gradients additively
across fan-out.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_ids = itertools.count()

_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "check_finite": os.environ.get("DYNUNET_CHECK_FINITE", "") not in ("", "0"),
}


def default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype for newly created tensors."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def set_check_finite(flag: bool) -> None:
    _state["check_finite"] = bool(flag)


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Rank <= 4 real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "id", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        keeps_precision = isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64)
        if dtype is None and not keeps_precision:
            dtype = default_dtype()
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.ndim > 4:
            raise ValueError(f"tensors are limited to rank 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.id = next(_ids)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op: str = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        return backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    # Arithmetic sugar; the ops themselves live in dynunet.functional.
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

    def __neg__(self):
        from . import functional as F

        return F.scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    """Wrap ``data`` as the output of ``op`` applied to ``parents``.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent, in order. The link is only recorded when some parent needs grad.
    """
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


@dataclass
class TapeRecord:
    op: str
    input_ids: tuple
    output_id: int


@dataclass
class Tape:
    """Topologically ordered records of the ops that produced a tensor."""

    records: list = field(default_factory=list)
    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list = []
        seen = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))
        tape = cls()
        for node in order:
            if node._backward is not None:
                tape.records.append(TapeRecord(node._op, tuple(p.id for p in node._parents), node.id))
        tape.nodes = order
        return tape

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> Tape:
    """Populate ``.grad`` of every leaf reachable from ``loss`` that requires grad."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}; pass grad explicitly")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")
    tape = Tape.from_output(loss)
    grads = {loss.id: np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(f"{node._op}: gradient shape {pg.shape} != input shape {parent.shape}")
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
    return tape
