"""Reverse-mode gradient tape over plain numpy arrays.

The kernels in :mod:`edgeinfinite.numerics` check :func:`active_tape` and
record themselves only while a tape is active *and* at least one of their
inputs is tracked.  Inference therefore runs tape-free: the only cost on
the hot path is a thread-local attribute lookup.

A tape is single-owner and single-threaded.  Arrays are treated as
immutable values once returned by a kernel; the tape keeps references to
every tracked array so that ``id()`` handles stay unique for its lifetime.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TapeError(RuntimeError):
    """Tape contract violation: non-scalar loss, unwatched reads, etc."""


class Tape:
    """Records primitive ops so a scalar loss can be differentiated.

    Only arrays passed to :meth:`watch` (and values computed from them)
    are tracked.  After :meth:`backward`, gradients are available through
    :meth:`gradient` for exactly the watched arrays; everything else is
    discarded.
    """

    def __init__(self) -> None:
        # each op: (output id, input ids (None = untracked), backward fn)
        self._ops: list[tuple[int, tuple[Optional[int], ...], BackwardFn]] = []
        self._live: dict[int, np.ndarray] = {}
        self._watched: dict[int, np.ndarray] = {}
        self._grads: Optional[dict[int, np.ndarray]] = None

    def watch(self, arr: np.ndarray) -> np.ndarray:
        """Mark ``arr`` as a trainable leaf. Returns ``arr`` for chaining."""
        if not isinstance(arr, np.ndarray):
            raise TypeError(f"can only watch numpy arrays, got {type(arr).__name__}")
        self._live[id(arr)] = arr
        self._watched[id(arr)] = arr
        return arr

    def tracks(self, arr) -> bool:
        return isinstance(arr, np.ndarray) and id(arr) in self._live

    def record(
        self,
        out: np.ndarray,
        inputs: Sequence[Optional[np.ndarray]],
        backward: BackwardFn,
    ) -> None:
        """Append one primitive op.

        ``backward(grad_out)`` must return one gradient per input, aligned
        with ``inputs``; ``None`` entries are skipped.  Input ids are
        resolved *now*, so untracked inputs can never alias a later
        tracked array.
        """
        in_ids = tuple(
            id(x) if x is not None and self.tracks(x) else None for x in inputs
        )
        self._live[id(out)] = out
        self._ops.append((id(out), in_ids, backward))

    @property
    def num_ops(self) -> int:
        return len(self._ops)

    def backward(self, loss: np.ndarray) -> None:
        """Accumulate gradients of ``loss`` w.r.t. all watched arrays.

        Visits the recorded ops exactly once, in reverse recording order.
        The gradient of the loss w.r.t. itself is 1.
        """
        if not self.tracks(loss):
            raise TapeError("loss was not recorded on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss)}
        for out_id, in_ids, bwd in reversed(self._ops):
            g_out = grads.pop(out_id, None)
            if g_out is None:
                continue  # no downstream dependence on this op
            for in_id, g_in in zip(in_ids, bwd(g_out)):
                if in_id is None or g_in is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = g_in if acc is None else acc + g_in
        self._grads = {
            wid: grads.get(wid, np.zeros_like(w)) for wid, w in self._watched.items()
        }

    def gradient(self, arr: np.ndarray) -> np.ndarray:
        """Gradient of the loss w.r.t. a watched array (after backward)."""
        if self._grads is None:
            raise TapeError("backward() has not been run")
        if id(arr) not in self._watched:
            raise TapeError("gradient requested for an array that was not watched")
        return self._grads[id(arr)]


_STATE = threading.local()


def active_tape() -> Optional[Tape]:
    return getattr(_STATE, "tape", None)


@contextmanager
def recording(tape: Tape):
    """Make ``tape`` the active tape for the current thread."""
    prev = getattr(_STATE, "tape", None)
    _STATE.tape = tape
    try:
        yield tape
    finally:
        _STATE.tape = prev


@contextmanager
def paused():
    """Temporarily disable recording (used for stop-gradient boundaries)."""
    prev = getattr(_STATE, "tape", None)
    _STATE.tape = None
    try:
        yield
    finally:
        _STATE.tape = prev


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (have, want) in enumerate(zip(grad.shape, shape)):
        if want == 1 and have != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)
