"""Dense floating-point kernels with optional tape recording.

Matrices are plain 2-D numpy arrays, row-major, float32 by default.  Every
kernel accepts float64 arrays too (the gradient-check tooling runs the
whole model in float64).  Reductions — matmul inner products, softmax
denominators, norm statistics, the sum kernels — always accumulate in
float64 and round once at the end, so float32 results drift as little as
possible.

When a :class:`~edgeinfinite.tape.Tape` is active and an input is tracked,
kernels record a backward closure; otherwise they are ordinary numpy code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tape as _tape
from .tape import unbroadcast

DEFAULT_DTYPE = np.float32

# Mask value for blocked attention scores. Large enough that exp()
# underflows to zero, small enough to stay finite in float32.
NEG_MASK = -1.0e30


class ShapeError(ValueError):
    """Operand dimensions do not satisfy an operation's contract."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


def require_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give identical streams everywhere."""
    return np.random.default_rng(seed)


def _coerce(value, like: np.ndarray) -> np.ndarray:
    """Turn python scalars into arrays matching ``like``'s dtype."""
    if isinstance(value, np.ndarray):
        return value
    return np.asarray(value, dtype=like.dtype)


def _record(out, inputs, backward) -> np.ndarray:
    t = _tape.active_tape()
    if t is not None and any(t.tracks(x) for x in inputs):
        t.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def _accum_matmul(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    prod = np.matmul(
        a.astype(np.float64, copy=False), b.astype(np.float64, copy=False)
    )
    return prod.astype(out_dtype, copy=False)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out_dtype = np.result_type(a, b)
    out = _accum_matmul(a, b, out_dtype)

    def backward(g):
        ga = _accum_matmul(g, b.T, a.dtype)
        gb = _accum_matmul(a.T, g, b.dtype)
        return (ga, gb)

    return _record(out, (a, b), backward)


def transpose(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a.T)

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _record(out, (a,), backward)


def vstack(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate row blocks (used to prepend cached context rows)."""
    parts = [p for p in parts if p is not None and p.shape[0] > 0]
    if not parts:
        raise ShapeError("vstack needs at least one non-empty block")
    if len(parts) == 1:
        only = parts[0]
        out = only.copy()
        return _record(out, (only,), lambda g: (g,))
    out = np.concatenate(parts, axis=0)
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return _record(out, tuple(parts), backward)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules apply)


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    b = _coerce(b, a)
    out = np.asarray(a + b)

    def backward(g):
        return (unbroadcast(g, a.shape), unbroadcast(g, b.shape))

    return _record(out, (a, b), backward)


def sub(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    a = _coerce(a, b) if a.ndim == 0 and a.dtype != b.dtype else a
    b = _coerce(b, a)
    out = np.asarray(a - b)

    def backward(g):
        return (unbroadcast(g, a.shape), unbroadcast(-g, b.shape))

    return _record(out, (a, b), backward)


def mul(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    b = _coerce(b, a)
    out = np.asarray(a * b)

    def backward(g):
        return (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape))

    return _record(out, (a, b), backward)


def div(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    b = _coerce(b, a)
    out = np.asarray(a / b)

    def backward(g):
        ga = unbroadcast(g / b, a.shape)
        gb = unbroadcast(-g * a / (b * b), b.shape)
        return (ga, gb)

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: np.ndarray) -> np.ndarray:
    out = np.maximum(x, 0)

    def backward(g):
        return (g * (x > 0),)

    return _record(out, (x,), backward)


def sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t)).astype(x.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), backward)


def elu1(x: np.ndarray) -> np.ndarray:
    """ELU shifted up by one: x+1 for x>0, exp(x) otherwise.

    Strictly positive for every finite input; clamped at the smallest
    normal float so extreme negatives cannot underflow to zero (the
    memory normalization term must stay positive).
    """
    neg_exp = np.exp(np.minimum(x, 0))
    out = np.where(x > 0, x + 1.0, neg_exp)
    tiny = np.finfo(out.dtype).tiny
    out = np.maximum(out, tiny).astype(x.dtype, copy=False)

    def backward(g):
        return (g * np.where(x > 0, 1.0, neg_exp).astype(x.dtype, copy=False),)

    return _record(out, (x,), backward)


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1+exp(x)), clamped positive; alternative memory feature map."""
    out = np.logaddexp(0.0, x.astype(np.float64)).astype(x.dtype)
    out = np.maximum(out, np.finfo(out.dtype).tiny)
    sig = np.where(
        x >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x))),
        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
    ).astype(x.dtype, copy=False)

    def backward(g):
        return (g * sig,)

    return _record(out, (x,), backward)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; each row sums to one."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D input, got {x.shape}")
    require_finite(np.max(x, axis=1), "softmax input (row max)")
    shifted = (x - x.max(axis=1, keepdims=True)).astype(np.float64, copy=False)
    e = np.exp(shifted)
    out = (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)

    def backward(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return ((out * (g - inner)).astype(x.dtype, copy=False),)

    return _record(out, (x,), backward)


_ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "elu1": elu1,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "softmax_rows": softmax_rows,
}


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    """Dispatch by name. Raises NumericError on non-finite input."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None
    require_finite(x, f"activation({kind}) input")
    return fn(x)


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Scale each row to unit RMS, then multiply by a learned weight vector."""
    if x.ndim != 2 or weight.shape != (x.shape[1],):
        raise ShapeError(f"rmsnorm shapes: x {x.shape}, weight {weight.shape}")
    x64 = x.astype(np.float64, copy=False)
    inv = 1.0 / np.sqrt((x64 * x64).mean(axis=1, keepdims=True) + eps)
    out = (x64 * inv * weight).astype(x.dtype, copy=False)

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        w64 = weight.astype(np.float64, copy=False)
        d = x.shape[1]
        inner = (g64 * w64 * x64).sum(axis=1, keepdims=True)
        gx = g64 * w64 * inv - x64 * (inv**3) * inner / d
        gw = (g64 * x64 * inv).sum(axis=0)
        return (gx.astype(x.dtype, copy=False), gw.astype(weight.dtype, copy=False))

    return _record(out, (x, weight), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: np.ndarray) -> np.ndarray:
    """Sum of all entries as a 0-d array (float64 accumulation)."""
    out = np.asarray(x.sum(dtype=np.float64), dtype=x.dtype)

    def backward(g):
        return (np.full_like(x, float(g)),)

    return _record(out, (x,), backward)


def cross_entropy_sum(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[np.ndarray, int]:
    """Summed next-token cross entropy over rows whose target is >= 0.

    Returns ``(loss_sum, n_rows)`` where ``loss_sum`` is a 0-d array
    recorded on the tape and ``n_rows`` counts the supervised rows.
    Rows with target -1 are ignored.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_sum needs 2-D logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError("one target per logits row required")
    valid = targets >= 0
    n = int(valid.sum())
    x64 = logits.astype(np.float64, copy=False)
    m = x64.max(axis=1, keepdims=True)
    lse = (m[:, 0] + np.log(np.exp(x64 - m).sum(axis=1)))
    picked = np.where(valid, x64[np.arange(len(targets)), np.maximum(targets, 0)], 0.0)
    total = float(((lse - picked) * valid).sum())
    out = np.asarray(total, dtype=logits.dtype)

    def backward(g):
        probs = np.exp(x64 - m)
        probs /= probs.sum(axis=1, keepdims=True)
        rows = np.arange(len(targets))
        probs[rows[valid], targets[valid]] -= 1.0
        probs[~valid] = 0.0
        return ((probs * float(g)).astype(logits.dtype, copy=False),)

    return _record(out, (logits,), backward), n


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FdReport:
    """Worst-coordinate comparison of analytic vs central-difference grads."""

    worst_error: float
    worst_param: int
    worst_coord: tuple
    absolute_at_worst: bool
    n_coords: int


def finite_difference_check(
    f: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    h: float = 1e-3,
    rel_floor: float = 1e-4,
) -> FdReport:
    """Compare analytic gradients against central finite differences.

    ``f`` must be deterministic and re-read ``params`` on every call; each
    coordinate is perturbed in place by +/- h and restored.  Coordinates
    where both the analytic and estimated gradients are below
    ``rel_floor`` in magnitude are compared absolutely (the relative error
    at a flat point is meaningless); all others relatively.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    worst = FdReport(0.0, -1, (), False, 0)
    n = 0
    for pi, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param/grad shape mismatch at index {pi}")
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            f_plus = f()
            p[idx] = orig - h
            f_minus = f()
            p[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            an = float(g[idx])
            denom = max(abs(fd), abs(an))
            if denom < rel_floor:
                err, is_abs = abs(fd - an), True
            else:
                err, is_abs = abs(fd - an) / denom, False
            if err > worst.worst_error:
                worst = FdReport(err, pi, idx, is_abs, 0)
            n += 1
            it.iternext()
    worst.n_coords = n
    return worst
