"""Dense tensors with tape-based reverse-mode differentiation.

The execution model is deliberately flat: while a :class:`Tape` is active,
every differentiable op appends one backward closure to it. Closures capture
whatever forward activations they need. :func:`backward` seeds the loss
gradient and replays the closures in exact reverse execution order, so the
topological-order invariant holds by construction.

Tensors are immutable once written by an op. A tape and the tensors recorded
on it belong to a single thread; the active-tape stack is thread-local so
independent tapes may run concurrently on separate threads.
"""

from __future__ import annotations

import hashlib
import threading
from typing import Iterable, Optional

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape on this thread, or None when recording is off."""
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops, replayed in reverse by backward()."""

    def __init__(self):
        self._records: list = []

    def record(self, backward_fn) -> None:
        self._records.append(backward_fn)

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: tapes closed out of order")


class Tensor:
    """A dense n-dimensional array plus an optional gradient buffer.

    ``data`` is a numpy array of float32 (default) or float64. ``grad``,
    when present, always has the same shape as ``data``. Node identity on a
    tape is plain Python object identity.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for op outputs: no dtype checks, no copies.
        t = object.__new__(cls)
        t.data = arr
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"


def parameter(data, dtype=None) -> Tensor:
    """A trainable tensor: grad preallocated to zeros.

    Parameters never reached by backward() therefore report an all-zero
    gradient rather than None.
    """
    t = Tensor(data, dtype=dtype)
    t.grad = np.zeros_like(t.data)
    return t


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add g into t.grad, allocating on first touch.

    Always copies on first touch: pass-through ops (add, reshape) hand over
    the consumer's own grad buffer, which must not be aliased.
    """
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad for everything on the tape that loss depends on.

    ``loss`` must be a scalar recorded on ``tape``. Ops are visited in exact
    reverse execution order; gradients accumulate additively, so fan-out in
    the forward graph is handled by the replay itself.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape._records):
        fn()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0.0)


def checksum(named_arrays: dict) -> str:
    """SHA-256 over raw bytes of arrays, keyed and ordered by name.

    Used to verify bitwise freezes (identical digest iff identical bits).
    """
    h = hashlib.sha256()
    for name in sorted(named_arrays):
        arr = named_arrays[name]
        data = arr.data if isinstance(arr, Tensor) else arr
        h.update(name.encode())
        h.update(str(data.dtype).encode())
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


# --- initialization -------------------------------------------------------

def kaiming_conv(rng: np.random.Generator, c_in: int, k: int, c_out: int, dtype) -> np.ndarray:
    """He fan-in normal init for a [C_in, k, k, C_out] kernel."""
    fan_in = c_in * k * k
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((c_in, k, k, c_out)) * std).astype(dtype)


def kaiming_linear(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> np.ndarray:
    """He fan-in normal init for a [d_in, d_out] weight."""
    std = np.sqrt(2.0 / d_in)
    return (rng.standard_normal((d_in, d_out)) * std).astype(dtype)
