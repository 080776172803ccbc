"""Inference strategy: long/short routing, prefill compression, decode flush.

Long inputs (``L >= sink + window + seg_len``) are prefetched in three
phases: the first ``sink`` tokens are encoded and pinned in cache; the
middle of the sequence is cut into full segments, each run through the
stack with the sink rows as visible context and folded into the
compressive memory; the tail (at least ``window`` tokens) is encoded into
the live cache.  Short inputs keep their full KV cache and never touch
memory, so they behave exactly like the dense baseline.

During decode, whenever the uncompressed residual (everything cached
beyond sink and window) reaches ``seg_len``, that segment is folded into
memory, the cache is truncated back to the sink rows, and the window
tokens are re-encoded.  Cache size therefore never exceeds
``sink + window + seg_len`` rows, no matter how long generation runs.

Rotary positions are cache-local: every block starts at the current
number of cached rows, so positions stay bounded forever.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nm
from . import tape as _tape
from .attention import MemoryState, attention_forward
from .kvcache import KvCache
from .model_io import Model
from .rope import RotaryTable

MODE_DENSE = "dense"
MODE_EDGEINFINITE = "edgeinfinite"

ROUTE_LONG = "long"
ROUTE_SHORT = "short"


@dataclass
class InferenceConfig:
    seg_len: int = 8
    sink_len: int = 4
    window_len: int = 2
    max_len: int = 64

    def __post_init__(self):
        if min(self.seg_len, self.sink_len, self.window_len, self.max_len) < 1:
            raise ValueError("all inference lengths must be positive")
        if self.max_len <= self.sink_len + self.window_len:
            raise ValueError("max_len must exceed sink_len + window_len")

    @property
    def route_threshold(self) -> int:
        return self.sink_len + self.window_len + self.seg_len


def toy_config(max_len: int = 64) -> InferenceConfig:
    return InferenceConfig(seg_len=8, sink_len=4, window_len=2, max_len=max_len)


def paper_scale_config(max_len: int = 8192) -> InferenceConfig:
    return InferenceConfig(seg_len=2048, sink_len=300, window_len=200, max_len=max_len)


def route(length: int, cfg: InferenceConfig) -> str:
    """Long/short dispatch: long iff the input fills sink+window+segment."""
    return ROUTE_LONG if length >= cfg.route_threshold else ROUTE_SHORT


@dataclass
class Counters:
    """Analytic, deterministic work accounting (not sampled)."""

    flops: int = 0
    attn_flops: int = 0
    prefill_flops: int = 0
    prefill_attn_flops: int = 0
    peak_bytes: int = 0

    def add(self, total: int, attn: int = 0) -> None:
        self.flops += total
        self.attn_flops += attn

    def note_bytes(self, n: int) -> None:
        self.peak_bytes = max(self.peak_bytes, n)


@dataclass
class TraceEvent:
    step: int
    stage: str  # prefill | decode | flush
    sink_len: int
    rolling_len: int
    total_rows: int
    memory_segments: int
    flops: int

    def format(self) -> str:
        return (
            f"step={self.step} stage={self.stage} sink={self.sink_len} "
            f"rolling={self.rolling_len} rows={self.total_rows} "
            f"segments={self.memory_segments} flops={self.flops}"
        )


class ModelState:
    """Mutable state of one generation session.

    Holds the (shared, read-only) model plus everything that changes while
    generating: cache, per-layer-per-head memory, the token history, the
    step counter, and work counters.  One session per thread.
    """

    def __init__(
        self,
        model: Model,
        cfg: InferenceConfig,
        mode: str = MODE_EDGEINFINITE,
        trace: Optional[Callable[[TraceEvent], None]] = None,
        dense_chunk: int = 512,
        max_position: Optional[int] = None,
    ):
        if mode not in (MODE_DENSE, MODE_EDGEINFINITE):
            raise ValueError(f"unknown mode {mode!r}")
        self.model = model
        self.cfg = cfg
        self.mode = mode
        self.trace = trace
        self.dense_chunk = dense_chunk
        mc = model.cfg
        self.cache = KvCache(
            mc.n_layers, mc.n_heads, mc.head_dim, sink_quota=cfg.sink_len,
            dtype=model.embed.dtype,
        )
        self.memory: list[list[MemoryState]] = [
            [MemoryState.empty(mc.head_dim) for _ in range(mc.n_heads)]
            for _ in range(mc.n_layers)
        ]
        self.tokens: list[int] = []
        self.step_index = 0
        self.counters = Counters()
        self.prefilled = False
        self.train_tape: Optional[_tape.Tape] = None
        self.last_block_start = 0  # token index of the first returned logits row
        self._rotary: Optional[RotaryTable] = None
        self._max_position = max_position
        self._embed_t = np.ascontiguousarray(model.embed.T)

    # -- bookkeeping -------------------------------------------------------

    @property
    def segments_compressed(self) -> int:
        return self.memory[0][0].segment_count

    def _ensure_rotary(self, needed: int) -> RotaryTable:
        needed = max(needed, self.cfg.route_threshold + 2)
        if self._max_position is not None:
            needed = max(needed, self._max_position)
        if self._rotary is None or self._rotary.max_position < needed:
            self._rotary = RotaryTable(
                self.model.cfg.head_dim, needed, base=self.model.cfg.rope_base
            )
        return self._rotary

    def _emit_trace(self, stage: str) -> None:
        if self.trace is None:
            return
        self.trace(
            TraceEvent(
                step=self.step_index,
                stage=stage,
                sink_len=self.cache.sink_len,
                rolling_len=self.cache.rolling_len,
                total_rows=self.cache.rows(),
                memory_segments=self.segments_compressed,
                flops=self.counters.flops,
            )
        )

    def _residual_len(self) -> int:
        """Uncompressed tokens beyond sink and window (pending token included)."""
        return (
            len(self.tokens)
            - self.cfg.sink_len
            - self.segments_compressed * self.cfg.seg_len
            - self.cfg.window_len
        )


# ---------------------------------------------------------------------------
# forward pass


def _count_block(state: ModelState, T: int, ctx: int, read_mem: bool, fold: bool):
    """Analytic flop count for one block (dominant matmul terms)."""
    mc = state.model.cfg
    d, d_h, d_ff, V = mc.d_model, mc.head_dim, mc.d_ff, mc.vocab_size
    H, L = mc.n_heads, mc.n_layers
    d_hid = mc.gate_hidden_dim
    n_keys = ctx + T
    attn = H * L * (4 * T * n_keys * d_h + 5 * T * n_keys)
    per_layer = 6 * T * d + 8 * T * d * d + 6 * T * d + 4 * T * d * d_ff + T * d_ff
    if read_mem:
        per_layer += H * (4 * T * d_h * d_h + 4 * T * d_hid * d_h + 9 * T * d_h)
    if fold:
        per_layer += H * (2 * T * d_h * d_h + 2 * T * d_h)
    total = L * per_layer + attn + 3 * T * d + 2 * T * d * V
    state.counters.add(total, attn)
    itemsize = np.dtype(state.model.embed.dtype).itemsize
    kv_bytes = state.cache.rows() * d_h * itemsize * 2 * H * L
    transient = (T * n_keys + 10 * T * d + T * V) * itemsize
    state.counters.note_bytes(kv_bytes + transient)


def _forward_block(
    state: ModelState,
    ids: Sequence[int],
    *,
    fold_memory: bool = False,
    append_cache: bool = True,
) -> np.ndarray:
    """Run one token block through the stack; returns (T, vocab) logits.

    The block attends to all currently cached rows (fully visible) and to
    itself causally.  Memory is read whenever it is non-empty in
    edgeinfinite mode; ``fold_memory`` additionally compresses this
    block's keys/values into memory (used for segment passes, which do
    not append to the cache).
    """
    model, mc = state.model, state.model.cfg
    ids_arr = np.asarray(list(ids), dtype=np.int64)
    if ids_arr.size == 0:
        raise ValueError("empty token block")
    if ids_arr.min() < 0 or ids_arr.max() >= mc.vocab_size:
        raise ValueError("token id out of range")
    T = ids_arr.size
    pos0 = state.cache.rows()
    rotary = state._ensure_rotary(pos0 + T + 1)
    read_mem = state.mode == MODE_EDGEINFINITE and state.segments_compressed > 0
    _count_block(state, T, pos0, read_mem, fold_memory)

    x = model.embed[ids_arr]
    for li, layer in enumerate(model.layers):
        ctx = [
            (state.cache.keys(li, h), state.cache.values(li, h))
            for h in range(mc.n_heads)
        ]
        normed = nm.rmsnorm(x, layer.attn_norm)
        result = attention_forward(
            normed,
            layer.attn,
            layer.gates,
            rotary,
            start_position=pos0,
            memory=state.memory[li] if state.mode == MODE_EDGEINFINITE else None,
            cache=ctx,
            fold_memory=fold_memory,
            sigma=mc.sigma,
        )
        if fold_memory:
            state.memory[li] = result.memory
        if append_cache:
            for h, (k_rot, v) in enumerate(result.head_kv):
                state.cache.append(li, h, np.asarray(k_rot), np.asarray(v))
        x = nm.add(x, result.output)
        normed2 = nm.rmsnorm(x, layer.ffn_norm)
        ff = nm.matmul(nm.relu(nm.matmul(normed2, layer.ffn_in)), layer.ffn_out)
        x = nm.add(x, ff)
    final = nm.rmsnorm(x, model.final_norm)
    return nm.matmul(final, state._embed_t)


# ---------------------------------------------------------------------------
# prefill / decode / generate


def prefill(state: ModelState, tokens: Sequence[int]) -> np.ndarray:
    """Ingest the prompt; returns the logits of the final processed block.

    The last row predicts the first generated token.  Short inputs (and
    dense mode) retain the full KV cache; long inputs compress everything
    between sink and tail into memory.
    """
    tokens = list(tokens)
    if not tokens:
        raise ValueError("prefill needs a nonempty prompt")
    if state.prefilled:
        raise RuntimeError("session already prefilled")
    cfg = state.cfg
    state.tokens = list(tokens)
    L = len(tokens)

    if state.mode == MODE_EDGEINFINITE and route(L, cfg) == ROUTE_LONG:
        with _tape.paused():
            _forward_block(state, tokens[: cfg.sink_len])
            n_segments = (L - cfg.sink_len - cfg.window_len) // cfg.seg_len
            for i in range(n_segments):
                lo = cfg.sink_len + i * cfg.seg_len
                seg = tokens[lo : lo + cfg.seg_len]
                _forward_block(state, seg, fold_memory=True, append_cache=False)
        tail = tokens[cfg.sink_len + n_segments * cfg.seg_len :]
        state.last_block_start = L - len(tail)
        with _final_block_scope(state):
            logits = _forward_block(state, tail)
    else:
        chunks = [
            tokens[lo : lo + state.dense_chunk]
            for lo in range(0, L, state.dense_chunk)
        ]
        with _tape.paused():
            for chunk in chunks[:-1]:
                _forward_block(state, chunk)
        state.last_block_start = L - len(chunks[-1])
        with _final_block_scope(state):
            logits = _forward_block(state, chunks[-1])

    state.prefilled = True
    state.counters.prefill_flops = state.counters.flops
    state.counters.prefill_attn_flops = state.counters.attn_flops
    state._emit_trace("prefill")
    return logits


def _final_block_scope(state: ModelState):
    """The only block that may record: gradients stop at the memory handoff
    and at cached context rows, both produced by earlier (paused) blocks."""
    if state.train_tape is not None:
        return _tape.recording(state.train_tape)
    return _tape.paused()


def decode_step(state: ModelState) -> int:
    """Emit one greedy token; flush a full segment into memory when due."""
    if not state.prefilled:
        raise RuntimeError("decode_step called before prefill")
    cfg = state.cfg
    state.step_index += 1
    stage = "decode"
    with _tape.paused():
        if state.mode == MODE_EDGEINFINITE and state._residual_len() == cfg.seg_len:
            stage = "flush"
            segment = state.tokens[-cfg.seg_len - cfg.window_len : -cfg.window_len]
            state.cache.truncate_to_sink()
            _forward_block(state, segment, fold_memory=True, append_cache=False)
            logits = _forward_block(state, state.tokens[-cfg.window_len :])
        else:
            logits = _forward_block(state, state.tokens[-1:])
    next_id = int(np.argmax(logits[-1]))
    state.tokens.append(next_id)
    state._emit_trace(stage)
    return next_id


def generate(state: ModelState, tokens: Sequence[int]) -> list[int]:
    """Greedy generation until the total length reaches ``cfg.max_len``."""
    logits = prefill(state, tokens)
    first = int(np.argmax(logits[-1]))
    state.tokens.append(first)
    while len(state.tokens) < state.cfg.max_len:
        decode_step(state)
    return list(state.tokens)


def prefill_timed(state: ModelState, tokens: Sequence[int]) -> tuple[np.ndarray, float]:
    """Prefill plus wall-clock time-to-first-token in milliseconds."""
    start = time.perf_counter()
    logits = prefill(state, tokens)
    return logits, (time.perf_counter() - start) * 1000.0
