"""Command-line surface: generate, train-gate, bench, compare, inspect-cache.

All commands are deterministic for fixed inputs and seeds.  Outputs are
accumulated in memory and written in one shot, so a failing command never
leaves a partial file.  ``EINF_THREADS`` caps benchmark parallelism (one
independent session per thread; sessions share only read-only weights).
"""

from __future__ import annotations

import argparse
import io
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine, model_io, training
from .engine import InferenceConfig, ModelState, prefill, prefill_timed
from .model_io import ByteTokenizer, Model, ModelConfig
from .numerics import make_rng

BENCH_CSV_HEADER = "mode,length,ttft_ms,prefill_flops,peak_cache_rows,peak_bytes"
CACHE_CSV_HEADER = "step,sink_len,rolling_len,total,memory_segments"
COMPARE_TOLERANCE = 1e-4


@dataclass
class BenchRecord:
    mode: str
    length: int
    ttft_ms: float
    prefill_flops: int
    peak_cache_rows: int
    peak_bytes: int
    attn_flops: int = 0  # not part of the CSV schema; kept for analysis

    def csv_row(self) -> str:
        return (
            f"{self.mode},{self.length},{self.ttft_ms:.3f},"
            f"{self.prefill_flops},{self.peak_cache_rows},{self.peak_bytes}"
        )


# ---------------------------------------------------------------------------
# shared plumbing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model directory (model.json + weights.einf)")
    p.add_argument("--config", help="model config JSON (when initializing fresh)")
    p.add_argument("--gate", help="gate-only checkpoint to overlay")
    p.add_argument("--seed", type=int, default=0, help="init seed when no --model")
    p.add_argument("--mode", choices=("dense", "edgeinfinite"), default="edgeinfinite")
    p.add_argument("--seg-len", type=int, default=8)
    p.add_argument("--sink", type=int, default=4)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--max-tokens", type=int, default=32, help="new tokens to generate")
    p.add_argument("--trace", action="store_true", help="step trace on stderr")
    p.add_argument("--out", help="write output to this path instead of stdout")


def _load_model(args) -> Model:
    if args.model:
        model = model_io.load_model_dir(args.model)
    else:
        if args.config:
            cfg = ModelConfig.from_json(Path(args.config).read_text())
        else:
            cfg = ModelConfig()
        model = model_io.init_model(cfg, args.seed)
    if getattr(args, "gate", None):
        model_io.load_gate_checkpoint(model, args.gate)
    return model


def _inference_config(args, total_len: int) -> InferenceConfig:
    return InferenceConfig(
        seg_len=args.seg_len,
        sink_len=args.sink,
        window_len=args.window,
        max_len=max(total_len, args.sink + args.window + 1),
    )


def _read_prompt(args) -> list[int]:
    data = Path(args.prompt_file).read_bytes()
    return [ByteTokenizer.BOS] + ByteTokenizer().tokenize(data)


def _emit(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _stderr_trace(event: engine.TraceEvent) -> None:
    print(event.format(), file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    model = _load_model(args)
    prompt = _read_prompt(args)
    cfg = _inference_config(args, len(prompt) + args.max_tokens)
    state = ModelState(
        model, cfg, mode=args.mode, trace=_stderr_trace if args.trace else None
    )
    out_tokens = engine.generate(state, prompt)
    generated = ByteTokenizer().detokenize(out_tokens[len(prompt) :])
    if args.out:
        Path(args.out).write_bytes(generated)
    else:
        sys.stdout.buffer.write(generated)
        sys.stdout.buffer.flush()
    return 0


def cmd_train_gate(args) -> int:
    model = _load_model(args)
    infer_cfg = InferenceConfig(
        seg_len=args.seg_len,
        sink_len=args.sink,
        window_len=args.window,
        max_len=args.length + 4,
    )
    rng = make_rng(args.seed)
    data = [
        training.make_task(args.task, args.length, rng, infer_cfg)
        for _ in range(args.samples)
    ]
    train_cfg = training.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        task_mix=(args.task,),
    )
    result = training.train_gate(model, data, train_cfg, inference=infer_cfg)
    total, gate = model_io.parameter_count(model)
    out_dir = Path(args.out or "gate_run")
    out_dir.mkdir(parents=True, exist_ok=True)
    model_io.save_gate_checkpoint(out_dir / "gate.einf", model)
    curve = "step,loss\n" + "".join(
        f"{step},{loss:.6f}\n" for step, loss in result.curve
    )
    (out_dir / "loss_curve.csv").write_text(curve)
    print(
        f"trained {len(result.curve)} steps on {args.task}; "
        f"loss {result.curve[0][1]:.4f} -> {result.final_loss:.4f}; "
        f"trainable {gate}/{total} params ({100.0 * gate / total:.2f}%); "
        f"checkpoint at {out_dir / 'gate.einf'}"
    )
    return 0


def _bench_cell(model: Model, args, mode: str, length: int) -> BenchRecord:
    rng = make_rng(args.seed * 1_000_003 + length)
    prompt = [ByteTokenizer.BOS] + rng.integers(0, 256, size=length - 1).tolist()
    cfg = _inference_config(args, length + 1)
    state = ModelState(model, cfg, mode=mode)
    _, ttft_ms = prefill_timed(state, prompt)
    return BenchRecord(
        mode=mode,
        length=length,
        ttft_ms=ttft_ms,
        prefill_flops=state.counters.prefill_flops,
        peak_cache_rows=state.cache.peak_rows,
        peak_bytes=state.counters.peak_bytes,
        attn_flops=state.counters.prefill_attn_flops,
    )


def run_bench(model: Model, args, lengths: list[int], repeats: int) -> list[BenchRecord]:
    cells = [
        (mode, length, rep)
        for mode in ("dense", "edgeinfinite")
        for length in lengths
        for rep in range(repeats)
    ]
    workers = max(1, int(os.environ.get("EINF_THREADS", "1")))
    if workers == 1:
        return [_bench_cell(model, args, m, l) for m, l, _ in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_bench_cell, model, args, m, l) for m, l, _ in cells]
        return [f.result() for f in futures]


def cmd_bench(args) -> int:
    lengths = sorted({int(x) for x in args.lengths.split(",") if x.strip()})
    if not lengths or lengths[0] < 1:
        raise ValueError(f"bench lengths must be positive, got {args.lengths!r}")
    model = _load_model(args)
    records = run_bench(model, args, lengths, args.repeats)
    buf = io.StringIO()
    buf.write(BENCH_CSV_HEADER + "\n")
    for rec in records:
        buf.write(rec.csv_row() + "\n")
    _emit(args, buf.getvalue())
    return 0


def cmd_compare(args) -> int:
    """Per-position logit divergence between dense and edgeinfinite prefill.

    Positions are those of the edgeinfinite final block (for long prompts:
    the uncompressed tail); short prompts compare every position.  Short
    routes must agree to within tolerance; long routes report only —
    memory compression is an approximation by design.
    """
    model = _load_model(args)
    prompt = _read_prompt(args)
    cfg = _inference_config(args, len(prompt) + 1)
    chunk = max(len(prompt), 512)

    edge = ModelState(model, cfg, mode="edgeinfinite", dense_chunk=chunk)
    edge_logits = prefill(edge, prompt)
    dense = ModelState(model, cfg, mode="dense", dense_chunk=chunk)
    dense_logits = prefill(dense, prompt)

    start = edge.last_block_start
    dense_slice = dense_logits[start:]
    deltas = np.abs(
        edge_logits.astype(np.float64) - dense_slice.astype(np.float64)
    ).max(axis=1)
    is_long = engine.route(len(prompt), cfg) == engine.ROUTE_LONG

    buf = io.StringIO()
    buf.write("position,max_abs_delta_logit\n")
    for i, d in enumerate(deltas):
        buf.write(f"{start + i},{d:.3e}\n")
    worst = float(deltas.max())
    buf.write(
        f"# route={'long' if is_long else 'short'} positions={len(deltas)} "
        f"max_delta={worst:.3e} tolerance={COMPARE_TOLERANCE:g}\n"
    )
    _emit(args, buf.getvalue())
    if is_long:
        return 0
    return 0 if worst < COMPARE_TOLERANCE else 1


def cmd_inspect_cache(args) -> int:
    model = _load_model(args)
    prompt = _read_prompt(args)
    cfg = _inference_config(args, len(prompt) + args.max_tokens)
    rows: list[str] = []

    def collect(event: engine.TraceEvent) -> None:
        rows.append(
            f"{event.step},{event.sink_len},{event.rolling_len},"
            f"{event.total_rows},{event.memory_segments}"
        )
        if args.trace:
            _stderr_trace(event)

    state = ModelState(model, cfg, mode=args.mode, trace=collect)
    engine.generate(state, prompt)
    _emit(args, CACHE_CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgeinfinite",
        description="Bounded-cache long-context inference with compressive memory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="greedy generation from a prompt file")
    _add_common(p)
    p.add_argument("--prompt-file", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train-gate", help="fine-tune the memory gate")
    _add_common(p)
    p.add_argument("--task", choices=training.TASK_KINDS, default="kv_recall")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--length", type=int, default=32, help="task sequence length")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.005)
    p.set_defaults(fn=cmd_train_gate)

    p = sub.add_parser("bench", help="TTFT/flops/cache benchmark, CSV output")
    _add_common(p)
    p.add_argument("--lengths", default="32,64,128", help="comma-separated")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("compare", help="dense vs edgeinfinite logit divergence")
    _add_common(p)
    p.add_argument("--prompt-file", required=True)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("inspect-cache", help="per-step cache occupancy CSV")
    _add_common(p)
    p.add_argument("--prompt-file", required=True)
    p.set_defaults(fn=cmd_inspect_cache)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:  # console script
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
