"""Gradient tape and the DiffArray it differentiates through.

The design is a flat tape of (output, backward_fn) nodes appended in forward
order. backward() walks the tape once in reverse, so an array consumed by
several later nodes has its gradient fully accumulated before its own
producer runs. Tapes are single-use.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Optional

import numpy as np

from cstte.errors import NumericError, ShapeError


class DiffArray:
    """Dense 64-bit float buffer with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:  # pragma: no cover
        return f"DiffArray(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> DiffArray:
    """Leaf array that accumulates gradients across backward passes."""
    del name  # naming lives in the parameter dict, kept for call-site clarity
    return DiffArray(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def constant(data) -> DiffArray:
    """Leaf array that never receives a gradient."""
    return DiffArray(data, requires_grad=False)


class Tape:
    """Ordered record of one forward computation. Single use."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[tuple[DiffArray, Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def record(self, out: DiffArray, backward_fn: Callable[[np.ndarray], None]) -> None:
        if self.consumed:
            raise RuntimeError("cannot record on a consumed tape")
        out.tape = self
        self.nodes.append((out, backward_fn))


_ACTIVE_TAPE: Optional[Tape] = None

# Deterministic mode swaps the attention reductions for canonical
# (sorted-order) summation; it is the default so test and CLI runs are
# bit-reproducible and permutation-invariant.
_DETERMINISTIC = True


def set_deterministic(enabled: bool) -> None:
    global _DETERMINISTIC
    _DETERMINISTIC = bool(enabled)


def deterministic_mode() -> bool:
    return _DETERMINISTIC


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


@contextmanager
def recording(tape: Tape) -> Iterator[Tape]:
    """Make `tape` the recording target for ops run inside the block."""
    global _ACTIVE_TAPE
    if _ACTIVE_TAPE is not None:
        raise RuntimeError("a tape is already recording; tapes do not nest")
    if tape.consumed:
        raise RuntimeError("cannot record on a consumed tape")
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = None


def accumulate(arr: DiffArray, grad: np.ndarray) -> None:
    """Add `grad` into arr.grad, allocating the buffer on first touch."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != arr.data.shape:
        raise ShapeError(
            f"gradient shape {grad.shape} does not match value shape {arr.data.shape}"
        )
    if arr.grad is None:
        arr.grad = grad.copy()
    else:
        arr.grad += grad


def backward(tape: Tape, loss: DiffArray) -> None:
    """Propagate d(loss)/d(x) to every requires_grad array on the tape."""
    if tape.consumed:
        raise RuntimeError("tape already consumed; backward may run once per tape")
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        tape.consumed = True
        tape.nodes.clear()
        raise NumericError("loss is not finite")

    loss.grad = np.ones_like(loss.data)
    for out, backward_fn in reversed(tape.nodes):
        if out.grad is not None:
            backward_fn(out.grad)
    tape.consumed = True
    tape.nodes.clear()
