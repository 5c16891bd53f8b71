"""Reverse-mode differentiation over float64 numpy arrays.

Operations executed inside an active :class:`Tape` append a record holding the
inputs, the output and a closure mapping the output gradient to input
gradients.  The record list is in execution order, which is already a
topological order, so :func:`backward` only has to walk it in reverse.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_local = threading.local()


class TensorError(ValueError):
    """Raised on shape or argument mismatches inside the engine."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive calls; use as a context manager."""

    def __init__(self) -> None:
        self.records: list[tuple[tuple[Tensor, ...], Tensor, BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, fn: BackwardFn) -> None:
        self.records.append((tuple(inputs), output, fn))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def emit(
    inputs: Sequence[Tensor], out_data: np.ndarray, fn: BackwardFn, name: str | None = None
) -> Tensor:
    """Wrap a primitive's result and record it when any input needs a gradient."""
    out = Tensor(out_data, name=name)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, fn)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(value) for every value reachable from ``loss``.

    Returns a dict keyed by :attr:`Tensor.id`.  Leaf tensors (those with
    ``requires_grad`` that no record produced) also get ``.grad`` set.
    """
    if loss.data.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for inputs, out, fn in reversed(tape.records):
        produced.add(out.id)
        g = grads.get(out.id)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise TensorError(
                    f"gradient shape {gi.shape} does not match value shape {t.shape}"
                )
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
            leaves[t.id] = t
    for tid, t in leaves.items():
        if tid not in produced:
            t.grad = grads[tid]
    return grads


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def parameters_grads(params: Iterable[Tensor], grads: dict[int, np.ndarray]) -> list[np.ndarray]:
    """Gradients for ``params`` in order; zeros where the loss did not reach."""
    return [grads.get(p.id, np.zeros_like(p.data)) for p in params]
