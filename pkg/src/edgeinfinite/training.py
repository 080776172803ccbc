"""Fine-tuning of the memory gate on synthetic long-context tasks.

Only the gate tensors (per-head MLP and mixing vector) receive updates;
every backbone tensor stays bitwise frozen, so the base model remains
switchable.  Training is teacher-forced through the same segmented
forward that inference uses: the prompt's middle segments are compressed
into memory (no gradients — compressed history is a constant), and the
loss is next-token cross entropy over the supervised positions that fall
inside the final, differentiable block.

The synthetic tasks hide their answer *before* the first compression
boundary, so a model that only sees the live cache cannot solve them;
improving them requires routing information through the memory readout.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nm
from .engine import InferenceConfig, ModelState, decode_step, prefill
from .model_io import Model, gate_param_objects
from .tape import Tape, recording

TASK_KINDS = ("copy", "kv_recall", "needle")

FILLER_BYTE = 46  # '.'
KEY_BYTES = tuple(range(65, 73))  # 'A'..'H'
VALUE_BYTES = tuple(range(97, 105))  # 'a'..'h'
NEEDLE_MARK = 35  # '#'


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; training is aborted with context."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    epochs: int = 2
    batch_size: int = 4
    seed: int = 0
    momentum: float = 0.0
    task_mix: tuple[str, ...] = ("kv_recall",)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for kind in self.task_mix:
            if kind not in TASK_KINDS:
                raise ValueError(f"unknown task kind {kind!r}")


@dataclass(frozen=True)
class TaskSample:
    """A token sequence plus the half-open span of supervised answer tokens."""

    kind: str
    tokens: tuple[int, ...]
    answer_start: int
    answer_end: int

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.tokens[: self.answer_start]

    @property
    def answer(self) -> tuple[int, ...]:
        return self.tokens[self.answer_start : self.answer_end]


def make_task(
    kind: str, length: int, rng: np.random.Generator, cfg: InferenceConfig
) -> TaskSample:
    """Deterministic synthetic sample of ``length`` tokens.

    Memory-exercising kinds require ``length`` past the long-route
    threshold, and place the information needed for the answer inside the
    first compressed segment.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    if kind == "copy":
        if length < 2 or length % 2 != 0:
            raise ValueError("copy task needs an even length >= 2")
        half = length // 2
        payload = rng.integers(1, 250, size=half).tolist()
        return TaskSample(kind, tuple(payload + payload), half, length)

    threshold = cfg.route_threshold
    first_boundary = cfg.sink_len + cfg.seg_len
    if length <= threshold:
        raise ValueError(
            f"{kind} task needs length > route threshold {threshold}, got {length}"
        )
    if kind == "kv_recall":
        key = int(rng.choice(KEY_BYTES))
        value = int(rng.choice(VALUE_BYTES))
        tokens = [FILLER_BYTE] * length
        pair_at = cfg.sink_len  # first rows of the first compressed segment
        tokens[pair_at] = key
        tokens[pair_at + 1] = value
        tokens[-2] = key
        tokens[-1] = value
        assert pair_at + 1 < first_boundary
        return TaskSample(kind, tuple(tokens), length - 1, length)

    # needle: a marked value hidden at a random offset of the first segment
    value = int(rng.choice(VALUE_BYTES))
    tokens = rng.integers(1, 32, size=length).tolist()  # low bytes as noise
    offset = int(rng.integers(cfg.sink_len, first_boundary - 1))
    tokens[offset] = NEEDLE_MARK
    tokens[offset + 1] = value
    tokens[-2] = NEEDLE_MARK
    tokens[-1] = value
    return TaskSample("needle", tuple(tokens), length - 1, length)


def _block_targets(sample: TaskSample, block_start: int, block_len: int) -> np.ndarray:
    """Per-row next-token targets (-1 = unsupervised) for the final block.

    Row i sits at token index ``block_start + i`` and predicts the token
    at index ``block_start + i + 1``; only predictions landing inside the
    answer span are supervised.  Positions compressed into memory carry
    no logits, so supervision is restricted to the block the tape covers.
    """
    targets = np.full(block_len, -1, dtype=np.int64)
    for i in range(block_len):
        nxt = block_start + i + 1
        if sample.answer_start <= nxt < sample.answer_end and nxt < len(sample.tokens):
            targets[i] = sample.tokens[nxt]
    return targets


def gate_loss(
    model: Model,
    batch: Sequence[TaskSample],
    cfg: InferenceConfig,
    train_tape: Optional[Tape] = None,
) -> tuple[np.ndarray, int]:
    """Mean next-token cross entropy over the batch's supervised positions.

    Returns ``(loss, n_positions)``; the loss is a 0-d array, recorded on
    ``train_tape`` when one is given.  Raises on an empty batch or a batch
    with no supervised positions.
    """
    if not batch:
        raise ValueError("empty batch")
    loss_sum = None
    n_total = 0
    scope = recording(train_tape) if train_tape is not None else nullcontext()
    with scope:  # prefill scopes its own blocks; only the loss ops record here
        for sample in batch:
            state = ModelState(model, cfg)
            state.train_tape = train_tape
            logits = prefill(state, list(sample.tokens))
            targets = _block_targets(sample, state.last_block_start, logits.shape[0])
            part, n = nm.cross_entropy_sum(logits, targets)
            if n == 0:
                raise ValueError(
                    f"{sample.kind} sample has no supervised positions in the "
                    "final block; lengthen the answer span or the window"
                )
            n_total += n
            loss_sum = part if loss_sum is None else nm.add(loss_sum, part)
        return nm.mul(loss_sum, 1.0 / n_total), n_total


@dataclass
class TrainResult:
    model: Model
    curve: list[tuple[int, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.curve[-1][1] if self.curve else float("nan")


def train_gate(
    model: Model, data: Sequence[TaskSample], cfg: TrainConfig,
    inference: Optional[InferenceConfig] = None,
) -> TrainResult:
    """SGD on the gate tensors only; returns the model plus the loss curve.

    Backbone tensors are never touched — updates swap in new gate arrays.
    Deterministic for a fixed config, data order, and initial weights.
    """
    if not data:
        raise ValueError("no training samples")
    inference = inference or InferenceConfig()
    velocity: dict[int, np.ndarray] = {}
    result = TrainResult(model=model)
    step = 0
    for _epoch in range(cfg.epochs):
        for lo in range(0, len(data), cfg.batch_size):
            batch = data[lo : lo + cfg.batch_size]
            tape = Tape()
            gates = gate_param_objects(model)
            params = [
                (gate, name, tape.watch(arr))
                for gate in gates
                for name, arr in gate.tensors()
            ]
            loss, _ = gate_loss(model, batch, inference, train_tape=tape)
            loss_val = float(loss)
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_val} at step {step} "
                    f"(lr={cfg.learning_rate}, batch of {len(batch)})"
                )
            tape.backward(loss)
            for slot, (gate, name, arr) in enumerate(params):
                grad = tape.gradient(arr)
                if cfg.momentum > 0.0:
                    vel = velocity.get(slot)
                    vel = grad if vel is None else cfg.momentum * vel + grad
                    velocity[slot] = vel
                    grad = vel
                new = (arr - cfg.learning_rate * grad).astype(arr.dtype)
                setattr(gate, name, new)
            result.curve.append((step, loss_val))
            step += 1
    return result


def exact_match_accuracy(
    model: Model, samples: Iterable[TaskSample], cfg: InferenceConfig
) -> float:
    """Fraction of samples whose answer tokens are all greedily recovered."""
    total = hits = 0
    for sample in samples:
        state = ModelState(model, cfg)
        predicted = []
        logits = prefill(state, list(sample.prompt))
        predicted.append(int(np.argmax(logits[-1])))
        state.tokens.append(predicted[-1])
        while len(predicted) < len(sample.answer):
            predicted.append(decode_step(state))
        total += 1
        hits += int(tuple(predicted) == sample.answer)
    return hits / total if total else 0.0
