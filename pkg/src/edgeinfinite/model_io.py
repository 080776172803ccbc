"""Toy model stack: config, deterministic init, serialization, tokenizer.

Weights travel in a small self-describing binary container (magic
``EINF``) with a JSON tensor directory and a little-endian float32
payload, plus a ``model.json`` config document alongside.  A checkpoint
may hold the full model or only the gate tensors; the latter overlays a
base model without touching backbone weights.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator

import numpy as np

from .attention import GateParams, LayerWeights
from .numerics import make_rng

CONTAINER_MAGIC = b"EINF"
CONTAINER_VERSION = 1

WEIGHTS_FILENAME = "weights.einf"
CONFIG_FILENAME = "model.json"


class ContainerError(ValueError):
    """Base class for weight-container failures."""


class MagicError(ContainerError):
    """File does not start with the container magic."""


class VersionError(ContainerError):
    """Container format version is not supported."""


class TensorShapeError(ContainerError):
    """A stored tensor does not match the expected name/shape set."""


class TruncatedError(ContainerError):
    """File ends before the directory or payload does."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    vocab_size: int = 259
    rope_base: float = 10000.0
    sigma: str = "elu1"  # positive feature map for the compressive memory
    gate_mode: str = "per_coord"  # or "per_head_scalar"
    gate_hidden: int | None = None  # defaults to head_dim

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.gate_mode not in ("per_coord", "per_head_scalar"):
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def gate_hidden_dim(self) -> int:
        return self.gate_hidden if self.gate_hidden is not None else self.head_dim

    @property
    def gate_len(self) -> int:
        return 1 if self.gate_mode == "per_head_scalar" else self.head_dim

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


@dataclass
class LayerParams:
    attn_norm: np.ndarray
    attn: LayerWeights
    gates: list[GateParams]
    ffn_norm: np.ndarray
    ffn_in: np.ndarray
    ffn_out: np.ndarray


@dataclass
class Model:
    cfg: ModelConfig
    embed: np.ndarray  # (vocab, d_model); tied output projection
    layers: list[LayerParams]
    final_norm: np.ndarray


# ---------------------------------------------------------------------------
# initialization

GATE_INIT = -2.0  # sigmoid(-2) ~ 0.12: start close to the unmodified model


def init_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic weights from a seed; same seed, same bytes."""
    rng = make_rng(seed)
    d, d_h = cfg.d_model, cfg.head_dim

    def normal(rows, cols, scale):
        return (rng.standard_normal((rows, cols)) * scale).astype(np.float32)

    def gate_uniform(rows, cols):
        return rng.uniform(-0.08, 0.08, size=(rows, cols)).astype(np.float32)

    embed = normal(cfg.vocab_size, d, d**-0.5)
    layers = []
    for _ in range(cfg.n_layers):
        attn = LayerWeights(
            w_q=normal(d, d, d**-0.5),
            w_k=normal(d, d, d**-0.5),
            w_v=normal(d, d, d**-0.5),
            w_o=normal(d, d, d**-0.5),
        )
        gates = []
        for _h in range(cfg.n_heads):
            gates.append(
                GateParams(
                    w1=gate_uniform(d_h, cfg.gate_hidden_dim),
                    b1=np.zeros(cfg.gate_hidden_dim, dtype=np.float32),
                    w2=gate_uniform(cfg.gate_hidden_dim, d_h),
                    b2=np.zeros(d_h, dtype=np.float32),
                    g=np.full(cfg.gate_len, GATE_INIT, dtype=np.float32),
                )
            )
        layers.append(
            LayerParams(
                attn_norm=np.ones(d, dtype=np.float32),
                attn=attn,
                gates=gates,
                ffn_norm=np.ones(d, dtype=np.float32),
                ffn_in=normal(d, cfg.d_ff, d**-0.5),
                ffn_out=normal(cfg.d_ff, d, cfg.d_ff**-0.5),
            )
        )
    return Model(
        cfg=cfg, embed=embed, layers=layers, final_norm=np.ones(d, dtype=np.float32)
    )


# ---------------------------------------------------------------------------
# tensor naming


def named_tensors(model: Model) -> Iterator[tuple[str, np.ndarray]]:
    """Stable (name, array) walk over every parameter tensor."""
    yield "embed", model.embed
    yield "final_norm", model.final_norm
    for i, layer in enumerate(model.layers):
        p = f"layers.{i}"
        yield f"{p}.attn_norm", layer.attn_norm
        yield f"{p}.attn.w_q", layer.attn.w_q
        yield f"{p}.attn.w_k", layer.attn.w_k
        yield f"{p}.attn.w_v", layer.attn.w_v
        yield f"{p}.attn.w_o", layer.attn.w_o
        yield f"{p}.ffn_norm", layer.ffn_norm
        yield f"{p}.ffn_in", layer.ffn_in
        yield f"{p}.ffn_out", layer.ffn_out
        for h, gate in enumerate(layer.gates):
            for name, arr in gate.tensors():
                yield f"{p}.heads.{h}.gate.{name}", arr


def is_gate_tensor(name: str) -> bool:
    return ".gate." in name


def gate_param_objects(model: Model) -> list[GateParams]:
    return [gate for layer in model.layers for gate in layer.gates]


def set_tensor(model: Model, name: str, value: np.ndarray) -> None:
    """Replace one named tensor (value semantics: arrays are swapped, not
    written into)."""
    parts = name.split(".")
    if name == "embed":
        model.embed = value
    elif name == "final_norm":
        model.final_norm = value
    elif parts[0] == "layers":
        layer = model.layers[int(parts[1])]
        if parts[2] == "attn" and len(parts) == 4:
            setattr(layer.attn, parts[3], value)
        elif parts[2] == "heads" and parts[4] == "gate":
            setattr(layer.gates[int(parts[3])], parts[5], value)
        elif len(parts) == 3:
            setattr(layer, parts[2], value)
        else:
            raise KeyError(name)
    else:
        raise KeyError(name)


def parameter_count(model: Model) -> tuple[int, int]:
    """(total parameters, trainable gate parameters)."""
    total = gate = 0
    for name, arr in named_tensors(model):
        total += arr.size
        if is_gate_tensor(name):
            gate += arr.size
    return total, gate


def clone_model(model: Model, dtype=None) -> Model:
    """Deep copy, optionally casting every tensor (float64 for grad checks)."""
    copy = init_model(model.cfg, seed=0)
    for name, arr in named_tensors(model):
        out = arr.astype(dtype) if dtype is not None else arr.copy()
        set_tensor(copy, name, out)
    return copy


# ---------------------------------------------------------------------------
# weight container


def _write_container(path: Path, tensors: list[tuple[str, np.ndarray]]) -> None:
    directory = []
    offset = 0
    payload = bytearray()
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype=np.float32)
        raw = data.tobytes()
        if data.dtype.byteorder == ">":  # pragma: no cover - LE platforms
            raw = data.byteswap().tobytes()
        directory.append(
            {"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset}
        )
        payload.extend(raw)
        offset += len(raw)
    header = json.dumps({"tensors": directory}).encode("utf-8")
    blob = (
        CONTAINER_MAGIC
        + struct.pack("<II", CONTAINER_VERSION, len(header))
        + header
        + bytes(payload)
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)  # single write: no partial files


def _read_container(path: Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != CONTAINER_MAGIC:
        raise MagicError(f"{path}: not a weight container (bad magic)")
    if len(blob) < 12:
        raise TruncatedError(f"{path}: header cut short")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CONTAINER_VERSION:
        raise VersionError(
            f"{path}: container version {version}, expected {CONTAINER_VERSION}"
        )
    if len(blob) < 12 + header_len:
        raise TruncatedError(f"{path}: directory cut short")
    try:
        directory = json.loads(blob[12 : 12 + header_len].decode("utf-8"))["tensors"]
    except (ValueError, KeyError) as exc:
        raise TruncatedError(f"{path}: unreadable tensor directory") from exc
    payload = blob[12 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    seen_ranges: list[tuple[int, int]] = []
    for entry in directory:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if entry.get("dtype") != "f32":
            raise TensorShapeError(f"{path}: tensor {name} has unsupported dtype")
        if name in tensors:
            raise TensorShapeError(f"{path}: duplicate tensor name {name}")
        size = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        end = off + size
        if end > len(payload):
            raise TruncatedError(f"{path}: payload for {name} cut short")
        for s, e in seen_ranges:
            if off < e and s < end:
                raise TensorShapeError(f"{path}: tensor {name} overlaps another")
        seen_ranges.append((off, end))
        flat = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=off)
        tensors[name] = flat.reshape(shape).astype(np.float32)
    return tensors


def save_weights(path, model: Model) -> None:
    _write_container(Path(path), list(named_tensors(model)))


def load_weights(path, cfg: ModelConfig) -> Model:
    """Build a model from a container, validating names and shapes."""
    tensors = _read_container(Path(path))
    model = init_model(cfg, seed=0)
    expected = {name: arr.shape for name, arr in named_tensors(model)}
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise TensorShapeError(
            f"{path}: tensor set mismatch (missing {missing[:3]}, extra {extra[:3]})"
        )
    for name, arr in tensors.items():
        if arr.shape != expected[name]:
            raise TensorShapeError(
                f"{path}: {name} has shape {arr.shape}, expected {expected[name]}"
            )
        set_tensor(model, name, arr)
    return model


def save_gate_checkpoint(path, model: Model) -> None:
    """Checkpoint holding only the trainable gate tensors."""
    gate_only = [(n, a) for n, a in named_tensors(model) if is_gate_tensor(n)]
    _write_container(Path(path), gate_only)


def load_gate_checkpoint(model: Model, path) -> None:
    """Overlay gate tensors onto a model; backbone tensors untouched."""
    tensors = _read_container(Path(path))
    expected = {
        n: a.shape for n, a in named_tensors(model) if is_gate_tensor(n)
    }
    if set(tensors) != set(expected):
        raise TensorShapeError(f"{path}: gate tensor set does not match model")
    for name, arr in tensors.items():
        if arr.shape != expected[name]:
            raise TensorShapeError(
                f"{path}: {name} has shape {arr.shape}, expected {expected[name]}"
            )
        set_tensor(model, name, arr)


def save_model_dir(directory, model: Model) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / CONFIG_FILENAME).write_text(model.cfg.to_json())
    save_weights(directory / WEIGHTS_FILENAME, model)


def load_model_dir(directory) -> Model:
    directory = Path(directory)
    cfg = ModelConfig.from_json((directory / CONFIG_FILENAME).read_text())
    return load_weights(directory / WEIGHTS_FILENAME, cfg)


# ---------------------------------------------------------------------------
# tokenizer


class TokenError(ValueError):
    """Unknown token id passed to detokenize."""


class ByteTokenizer:
    """Byte-level tokenizer: ids 0..255 are bytes, then BOS/EOS/PAD."""

    BOS = 256
    EOS = 257
    PAD = 258
    vocab_size = 259

    def tokenize(self, data) -> list[int]:
        if isinstance(data, str):
            data = data.encode("utf-8")
        return list(bytes(data))

    def detokenize(self, ids) -> bytes:
        out = bytearray()
        for t in ids:
            t = int(t)
            if 0 <= t < 256:
                out.append(t)
            elif t in (self.BOS, self.EOS, self.PAD):
                continue  # structural ids carry no bytes
            else:
                raise TokenError(f"unknown token id {t}")
        return bytes(out)
