"""Rotary position embeddings applied to query and key states.

Adjacent coordinate pairs ``(2j, 2j+1)`` of each row are rotated by
``position * base**(-2j/head_dim)``.  Rotations preserve row norms, and
dot products of rotated queries and keys depend only on the position
difference — the property that makes cached keys reusable.

Positions here are always *cache-local*: every block processed against a
cache (or against sink context during memory compression) restarts at the
current number of cached rows, so positions stay bounded no matter how
long the sequence grows.
"""

from __future__ import annotations

import numpy as np

from . import tape as _tape


class PositionError(ValueError):
    """A requested position falls outside the precomputed table."""


class RotaryTable:
    """Precomputed cos/sin per (position, coordinate pair). Immutable."""

    def __init__(self, head_dim: int, max_position: int, base: float = 10000.0):
        if head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even, got {head_dim}")
        if max_position < 1:
            raise ValueError("max_position must be >= 1")
        self.head_dim = head_dim
        self.max_position = max_position
        self.base = base
        exponents = np.arange(0, head_dim, 2, dtype=np.float64) / head_dim
        inv_freq = base**-exponents  # (head_dim/2,)
        angles = np.outer(np.arange(max_position, dtype=np.float64), inv_freq)
        self.cos = np.cos(angles)  # (max_position, head_dim/2), float64
        self.sin = np.sin(angles)

    def apply(self, states: np.ndarray, start_position: int) -> np.ndarray:
        """Rotate row ``i`` of ``states`` with position ``start_position + i``."""
        if states.ndim != 2 or states.shape[1] != self.head_dim:
            raise ValueError(
                f"states must be (L, {self.head_dim}), got {states.shape}"
            )
        length = states.shape[0]
        if start_position < 0 or start_position + length > self.max_position:
            raise PositionError(
                f"positions [{start_position}, {start_position + length}) exceed "
                f"table size {self.max_position}"
            )
        cos = self.cos[start_position : start_position + length]
        sin = self.sin[start_position : start_position + length]
        x1 = states[:, 0::2].astype(np.float64, copy=False)
        x2 = states[:, 1::2].astype(np.float64, copy=False)
        out = np.empty_like(states)
        out[:, 0::2] = (x1 * cos - x2 * sin).astype(states.dtype, copy=False)
        out[:, 1::2] = (x1 * sin + x2 * cos).astype(states.dtype, copy=False)

        def backward(g):
            g1 = g[:, 0::2].astype(np.float64, copy=False)
            g2 = g[:, 1::2].astype(np.float64, copy=False)
            gx = np.empty_like(g)
            # inverse rotation: transpose of each 2x2 block
            gx[:, 0::2] = (g1 * cos + g2 * sin).astype(g.dtype, copy=False)
            gx[:, 1::2] = (-g1 * sin + g2 * cos).astype(g.dtype, copy=False)
            return (gx,)

        t = _tape.active_tape()
        if t is not None and t.tracks(states):
            t.record(out, (states,), backward)
        return out


def apply_rotary(
    table: RotaryTable, states: np.ndarray, start_position: int
) -> np.ndarray:
    return table.apply(states, start_position)
