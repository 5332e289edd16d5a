"""Deterministic binary checkpoints.

Layout: ``b"TDCK"``, u16 format version, u64 header length, a UTF-8 JSON header
(sorted keys), then every tensor listed in the header as little-endian float64
in header order.  The same state always serialises to the same bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.io import FormatError
from .model import ModelConfig

MAGIC = b"TDCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHQ")


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict  # name -> array
    train_config: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)  # {"t": int, "m": {name: array}, "v": {name: array}}
    step: int = 0
    epoch: int = 0
    rng: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    tensors = [("param", n, np.asarray(a, dtype=np.float64)) for n, a in ckpt.params.items()]
    for kind in ("m", "v"):
        tensors += [(kind, n, np.asarray(a, dtype=np.float64)) for n, a in ckpt.optimizer.get(kind, {}).items()]
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "optimizer_t": int(ckpt.optimizer.get("t", 0)),
        "step": int(ckpt.step),
        "epoch": int(ckpt.epoch),
        "rng": ckpt.rng,
        "tensors": [[kind, name, list(a.shape)] for kind, name, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for _, _, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    config = ModelConfig.from_dict(header["model_config"])
    if expect is not None and expect != config:
        diff = {k: (v, getattr(config, k)) for k, v in expect.to_dict().items() if getattr(config, k) != v}
        raise CheckpointMismatchError(f"checkpoint model config differs (expected, found): {diff}")
    offset = _PREFIX.size + hlen
    groups = {"param": {}, "m": {}, "v": {}}
    for kind, name, shape in header["tensors"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(raw):
            raise FormatError(f"{path}: truncated tensor payload")
        groups[kind][name] = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += n
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(
        model_config=config,
        params=groups["param"],
        train_config=header["train_config"],
        optimizer={"t": header["optimizer_t"], "m": groups["m"], "v": groups["v"]},
        step=header["step"],
        epoch=header["epoch"],
        rng=header["rng"],
    )
