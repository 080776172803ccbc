"""One attention layer: local segment attention, compressive memory, gating.

The layer runs per head.  Within each head:

* local attention is ordinary scaled-dot-product attention over the live
  cache rows plus the current block (causal within the block, cache rows
  fully visible);
* the compressive memory is a ``d_h x d_h`` accumulator ``kv_assoc`` of
  feature-mapped key/value outer products plus a normalization vector
  ``key_norm`` of summed key features.  Reading it recovers an
  approximate attention over every compressed token;
* a small trainable MLP refines the memory readout and a sigmoid gate
  vector mixes it with the local attention output.  These gate parameters
  are the only trainable tensors in the whole system.

When the memory is empty the layer degenerates to standard multi-head
attention — short inputs run exactly as a vanilla transformer would.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .rope import RotaryTable


class EmptyMemoryError(RuntimeError):
    """Memory read requested before any segment was compressed."""


MEMORY_EPS = 1e-6  # added to the readout denominator; key features are
# strictly positive but can be arbitrarily small


@dataclass
class LayerWeights:
    """Attention projections, each (d_model, d_model), split into heads."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def head_dim(self, n_heads: int) -> int:
        d_model = self.w_q.shape[0]
        if d_model % n_heads != 0:
            raise nm.ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
        return d_model // n_heads


@dataclass
class GateParams:
    """Per-head memory gate: refinement MLP plus mixing vector.

    ``w1`` (d_h, d_hid), ``b1`` (d_hid,), ``w2`` (d_hid, d_h), ``b2`` (d_h,),
    ``g`` (d_h,) — or (1,) in per-head-scalar mode.  The only trainable
    tensors in the system.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    g: np.ndarray

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
            ("g", self.g),
        ]


@dataclass(frozen=True)
class MemoryState:
    """Compressed memory for one head: value semantics, float64 accumulators.

    ``kv_assoc`` is (d_h, d_h), ``key_norm`` is (d_h,).  Both are exact
    running sums over all compressed tokens, so folding segments in any
    order or grouping gives the same state up to float64 rounding.
    """

    kv_assoc: np.ndarray
    key_norm: np.ndarray
    segment_count: int = 0

    @classmethod
    def empty(cls, head_dim: int) -> "MemoryState":
        return cls(
            kv_assoc=np.zeros((head_dim, head_dim), dtype=np.float64),
            key_norm=np.zeros(head_dim, dtype=np.float64),
            segment_count=0,
        )

    @property
    def is_empty(self) -> bool:
        return self.segment_count == 0


@dataclass(frozen=True)
class SegmentationPlan:
    """L = num_full * seg_len + residual_len with 0 <= residual_len < seg_len."""

    total_len: int
    seg_len: int
    num_full: int
    residual_len: int


def plan_segments(total_len: int, seg_len: int) -> SegmentationPlan:
    if total_len < 0 or seg_len < 1:
        raise ValueError(f"bad segmentation request: L={total_len}, seg={seg_len}")
    num_full, residual = divmod(total_len, seg_len)
    return SegmentationPlan(total_len, seg_len, num_full, residual)


def project_qkv(
    x: np.ndarray, weights: LayerWeights, n_heads: int
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Project a block into per-head (q, k, v) triples.

    Concatenating the head outputs column-wise reconstructs the full
    ``x @ W`` products.
    """
    d_h = weights.head_dim(n_heads)
    if x.ndim != 2 or x.shape[1] != weights.w_q.shape[0]:
        raise nm.ShapeError(f"input {x.shape} does not match d_model")
    triples = []
    for h in range(n_heads):
        cols = slice(h * d_h, (h + 1) * d_h)
        triples.append(
            (
                nm.matmul(x, weights.w_q[:, cols]),
                nm.matmul(x, weights.w_k[:, cols]),
                nm.matmul(x, weights.w_v[:, cols]),
            )
        )
    return triples


def causal_mask(n_queries: int, n_keys: int, dtype=np.float32) -> np.ndarray:
    """0/NEG_MASK matrix: query t sees all context rows plus block rows <= t."""
    n_ctx = n_keys - n_queries
    if n_ctx < 0:
        raise nm.ShapeError("causal attention needs n_keys >= n_queries")
    mask = np.zeros((n_queries, n_keys), dtype=dtype)
    block = np.triu(np.full((n_queries, n_queries), nm.NEG_MASK, dtype=dtype), k=1)
    mask[:, n_ctx:] = block
    return mask


def local_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool = True
) -> np.ndarray:
    """softmax(q k^T / sqrt(d_h)) v over cache rows plus the current block.

    ``k``/``v`` may carry prepended cache rows; with ``causal`` the last
    ``q.shape[0]`` key rows are treated as the current block and masked
    lower-triangularly, while all earlier rows stay fully visible.
    """
    if k.shape[0] == 0:
        raise nm.ShapeError("attention over an empty key set")
    if k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise nm.ShapeError(
            f"inconsistent attention shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    scale = 1.0 / np.sqrt(q.shape[1])
    scores = nm.mul(nm.matmul(q, nm.transpose(k)), scale)
    if causal:
        scores = nm.add(scores, causal_mask(q.shape[0], k.shape[0], dtype=q.dtype))
    return nm.matmul(nm.softmax_rows(scores), v)


def memory_update(
    mem: MemoryState, k_rot: np.ndarray, v: np.ndarray, sigma: str = "elu1"
) -> MemoryState:
    """Fold a block of rotated keys and values into memory.

    Returns a new state; the input is unchanged.  Accumulation is exact
    float64 addition, so any partition of a block into sub-blocks folds to
    the same state.  Gradients never flow through this op — compressed
    history is a constant to the tape.
    """
    if k_rot.shape != v.shape:
        raise nm.ShapeError(f"key/value blocks differ: {k_rot.shape} vs {v.shape}")
    if k_rot.shape[1] != mem.kv_assoc.shape[0]:
        raise nm.ShapeError("key width does not match memory")
    feats = np.asarray(nm.activation(sigma, k_rot), dtype=np.float64)
    v64 = v.astype(np.float64, copy=False)
    return MemoryState(
        kv_assoc=mem.kv_assoc + feats.T @ v64,
        key_norm=mem.key_norm + feats.sum(axis=0),
        segment_count=mem.segment_count + 1,
    )


def memory_read(
    mem: MemoryState, q_rot: np.ndarray, sigma: str = "elu1", eps: float = MEMORY_EPS
) -> np.ndarray:
    """Approximate attention over all compressed tokens, per query row.

    Row t is ``f(q_t) kv_assoc / (f(q_t) . key_norm + eps)`` where ``f``
    is the positive feature map.  The denominator is a positive scalar
    per row.
    """
    if mem.is_empty:
        raise EmptyMemoryError("memory has no compressed segments to read")
    feats = nm.activation(sigma, q_rot)
    assoc = mem.kv_assoc.astype(q_rot.dtype)
    norm = mem.key_norm.astype(q_rot.dtype).reshape(-1, 1)
    numer = nm.matmul(feats, assoc)
    denom = nm.add(nm.matmul(feats, norm), eps)
    return nm.div(numer, denom)


def gate_combine(
    attn_local: np.ndarray, attn_mem: np.ndarray, gate: GateParams
) -> np.ndarray:
    """Refine the memory readout through the gate MLP, then mix.

    ``mixed = s * refined + (1 - s) * local`` with ``s = sigmoid(g)``
    broadcast over rows.  Saturating ``g`` recovers either branch alone.
    """
    if attn_local.shape != attn_mem.shape:
        raise nm.ShapeError(
            f"branch shapes differ: {attn_local.shape} vs {attn_mem.shape}"
        )
    hidden = nm.relu(nm.add(nm.matmul(attn_mem, gate.w1), gate.b1))
    refined = nm.add(nm.matmul(hidden, gate.w2), gate.b2)
    s = nm.sigmoid(gate.g)
    return nm.add(nm.mul(refined, s), nm.mul(attn_local, nm.sub(1.0, s)))


@dataclass
class AttentionResult:
    output: np.ndarray  # (T, d_model)
    head_kv: list[tuple[np.ndarray, np.ndarray]]  # rotated keys, values per head
    memory: Optional[list[MemoryState]]  # updated states when folding


def attention_forward(
    x: np.ndarray,
    weights: LayerWeights,
    gates: Sequence[GateParams],
    rotary: RotaryTable,
    *,
    start_position: int,
    memory: Optional[Sequence[MemoryState]] = None,
    cache: Optional[Sequence[tuple[np.ndarray, np.ndarray]]] = None,
    fold_memory: bool = False,
    sigma: str = "elu1",
) -> AttentionResult:
    """One attention layer over a block of hidden states.

    ``cache`` holds per-head (keys, values) context rows, fully visible to
    every query.  With ``memory`` present and non-empty, each head mixes
    its memory readout into the local attention; otherwise the layer is
    plain causal multi-head attention.  ``fold_memory`` additionally
    accumulates this block's keys/values into the returned memory states.
    """
    n_heads = len(gates)
    use_memory = memory is not None and not memory[0].is_empty
    new_memory = list(memory) if memory is not None else None
    head_kv: list[tuple[np.ndarray, np.ndarray]] = []
    per_head_out: list[np.ndarray] = []

    for h, (q, k, v) in enumerate(project_qkv(x, weights, n_heads)):
        q_rot = rotary.apply(q, start_position)
        k_rot = rotary.apply(k, start_position)
        if cache is not None and cache[h] is not None and cache[h][0].shape[0] > 0:
            k_all = nm.vstack([cache[h][0], k_rot])
            v_all = nm.vstack([cache[h][1], v])
        else:
            k_all, v_all = k_rot, v
        attn_local = local_attention(q_rot, k_all, v_all, causal=True)
        if use_memory:
            attn_mem = memory_read(memory[h], q_rot, sigma=sigma)
            per_head_out.append(gate_combine(attn_local, attn_mem, gates[h]))
        else:
            per_head_out.append(attn_local)
        if fold_memory:
            if new_memory is None:
                raise ValueError("fold_memory requires memory states")
            new_memory[h] = memory_update(new_memory[h], k_rot, v, sigma=sigma)
        head_kv.append((k_rot, v))

    d_h = weights.head_dim(n_heads)
    out = None
    for h, head in enumerate(per_head_out):
        rows = slice(h * d_h, (h + 1) * d_h)
        contrib = nm.matmul(head, weights.w_o[rows, :])
        out = contrib if out is None else nm.add(out, contrib)
    return AttentionResult(output=out, head_kv=head_kv, memory=new_memory)
