"""Segmented attention with compressive memory and a bounded KV cache.

A desk-scale, from-scratch stack: numpy kernels with a reverse-mode
gradient tape, rotary embeddings, per-head compressive memory behind a
trainable gate, sink/window cache management, a greedy inference engine
with long/short routing, gate-only fine-tuning on synthetic recall tasks,
and a CLI for generation, training, comparison, and benchmarking.
"""

from .attention import (
    GateParams,
    LayerWeights,
    MemoryState,
    SegmentationPlan,
    attention_forward,
    gate_combine,
    local_attention,
    memory_read,
    memory_update,
    plan_segments,
    project_qkv,
)
from .engine import (
    InferenceConfig,
    ModelState,
    decode_step,
    generate,
    paper_scale_config,
    prefill,
    route,
    toy_config,
)
from .kvcache import KvCache
from .model_io import (
    ByteTokenizer,
    Model,
    ModelConfig,
    init_model,
    load_gate_checkpoint,
    load_model_dir,
    load_weights,
    save_gate_checkpoint,
    save_model_dir,
    save_weights,
)
from .numerics import activation, finite_difference_check, make_rng, matmul
from .rope import RotaryTable, apply_rotary
from .tape import Tape, recording
from .training import (
    TaskSample,
    TrainConfig,
    TrainResult,
    exact_match_accuracy,
    gate_loss,
    make_task,
    train_gate,
)

__version__ = "0.1.0"
