"""``ULCK`` checkpoint files.

Layout (little-endian): magic ``ULCK``, version byte, u32 length + UTF-8
config record (``key=value`` lines), u32 tensor count, then per tensor:
u32 name length, name, u32 rank, rank x u32 extents, float64 values.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .config import config_hash, format_kv, parse_kv
from .errors import FormatError
from .model import ModelConfig, ModelParameters, init_parameters

MAGIC = b"ULCK"
VERSION = 1
MOMENTUM_PREFIX = "optim.momentum."


def model_config_record(cfg: ModelConfig) -> dict:
    return {
        "model.input_dim": cfg.input_dim,
        "model.channels": ",".join(map(str, cfg.channels)),
        "model.blocks": ",".join(map(str, cfg.blocks)),
        "model.blstm_layers": cfg.blstm_layers,
        "model.blstm_hidden": cfg.blstm_hidden,
        "model.num_classes": cfg.num_classes,
        "model.head": cfg.head,
    }


def model_config_from_record(rec: dict) -> ModelConfig:
    ints = lambda s: tuple(int(v) for v in s.split(","))
    return ModelConfig(
        input_dim=int(rec["model.input_dim"]),
        channels=ints(rec["model.channels"]),
        blocks=ints(rec["model.blocks"]),
        blstm_layers=int(rec["model.blstm_layers"]),
        blstm_hidden=int(rec["model.blstm_hidden"]),
        num_classes=int(rec["model.num_classes"]),
        head=rec["model.head"],
    )


def save_checkpoint(path, params: ModelParameters, momentum: Optional[dict] = None,
                    extra: Optional[dict] = None) -> str:
    """Write a checkpoint; returns the config hash stored in its record."""
    record = {**model_config_record(params.config), **(extra or {})}
    record.setdefault("config_hash", config_hash(record))
    named = {k: v.data for k, v in params.state_tensors().items()}
    for k, v in (momentum or {}).items():
        named[MOMENTUM_PREFIX + k] = v
    text = format_kv(record).encode("utf-8")
    chunks = [MAGIC, bytes([VERSION]), struct.pack("<I", len(text)), text, struct.pack("<I", len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(enc)) + enc + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))
    return record["config_hash"]


def read_checkpoint(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"{path}: not a ULCK checkpoint")
    if take(1)[0] != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    (rec_len,) = struct.unpack("<I", take(4))
    record = parse_kv(take(rec_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    named = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        named[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).copy()
    return record, named


def load_checkpoint(path) -> tuple[ModelParameters, dict, dict]:
    """Returns parameters, momentum buffers, and the config record."""
    record, named = read_checkpoint(path)
    params = init_parameters(model_config_from_record(record), seed=0)
    params.load_state(named)
    momentum = {k[len(MOMENTUM_PREFIX):]: v for k, v in named.items() if k.startswith(MOMENTUM_PREFIX)}
    return params, momentum, record
