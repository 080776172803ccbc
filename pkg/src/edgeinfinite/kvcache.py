"""Bounded KV cache: a pinned sink region plus a rolling region.

The first ``sink_quota`` rows ever appended become the sink region and
are never evicted or overwritten; everything after rolls.  The engine's
flush discipline keeps the per-token row count at or below
``sink + window + seg_len`` at every step, which is the whole point:
cache size stays flat no matter how long the sequence grows.

Rows are stored per (layer, head) in growable buffers; appends during one
block keep all slots at equal length.
"""

from __future__ import annotations

import numpy as np


class KvCache:
    def __init__(
        self,
        n_layers: int,
        n_heads: int,
        head_dim: int,
        sink_quota: int,
        dtype=np.float32,
        initial_capacity: int = 64,
    ):
        if sink_quota < 0:
            raise ValueError("sink_quota must be >= 0")
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.sink_quota = sink_quota
        self.dtype = dtype
        cap = max(initial_capacity, 1)
        self._k = [
            [np.empty((cap, head_dim), dtype=dtype) for _ in range(n_heads)]
            for _ in range(n_layers)
        ]
        self._v = [
            [np.empty((cap, head_dim), dtype=dtype) for _ in range(n_heads)]
            for _ in range(n_layers)
        ]
        self._len = [[0] * n_heads for _ in range(n_layers)]
        self.peak_rows = 0

    # -- views ------------------------------------------------------------

    def rows(self) -> int:
        """Retained rows per token stream (uniform across layers/heads)."""
        return self._len[0][0]

    @property
    def sink_len(self) -> int:
        return min(self.sink_quota, self.rows())

    @property
    def rolling_len(self) -> int:
        return self.rows() - self.sink_len

    def budget(self) -> int:
        """Total retained rows, for reporting."""
        return self.rows()

    def keys(self, layer: int, head: int) -> np.ndarray:
        return self._k[layer][head][: self._len[layer][head]]

    def values(self, layer: int, head: int) -> np.ndarray:
        return self._v[layer][head][: self._len[layer][head]]

    # -- mutation ---------------------------------------------------------

    def append(self, layer: int, head: int, k_rows: np.ndarray, v_rows: np.ndarray):
        """Append rows to one slot: sink region first, then rolling."""
        if k_rows.shape != v_rows.shape or k_rows.shape[1] != self.head_dim:
            raise ValueError(
                f"row width mismatch: {k_rows.shape} vs head_dim {self.head_dim}"
            )
        n = self._len[layer][head]
        need = n + k_rows.shape[0]
        buf_k, buf_v = self._k[layer][head], self._v[layer][head]
        if need > buf_k.shape[0]:
            cap = max(need, 2 * buf_k.shape[0])
            new_k = np.empty((cap, self.head_dim), dtype=self.dtype)
            new_v = np.empty((cap, self.head_dim), dtype=self.dtype)
            new_k[:n] = buf_k[:n]
            new_v[:n] = buf_v[:n]
            self._k[layer][head] = buf_k = new_k
            self._v[layer][head] = buf_v = new_v
        buf_k[n:need] = k_rows
        buf_v[n:need] = v_rows
        self._len[layer][head] = need
        self.peak_rows = max(self.peak_rows, need)

    def truncate_to_sink(self) -> None:
        """Drop the rolling region everywhere; sink rows are untouched."""
        for layer in range(self.n_layers):
            for head in range(self.n_heads):
                self._len[layer][head] = min(
                    self._len[layer][head], self.sink_quota
                )

    def snapshot_sink(self, layer: int = 0, head: int = 0) -> np.ndarray:
        """Copy of the sink keys, for immutability checks."""
        return self.keys(layer, head)[: self.sink_len].copy()
