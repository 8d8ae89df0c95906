"""Checkpoint serialization.

Layout: magic "ACPK1", then the model config as canonical JSON (u32 length +
UTF-8 bytes), then every parameter in registry order as (u32 name length,
name, u32 rank, u32 dims..., little-endian float64 data). Writes are atomic
(temp file + rename).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig, canonical_json
from .errors import DataError
from .model import ModelParams, init_params

MAGIC = b"ACPK1"


def _config_doc(cfg):
    return dataclasses.asdict(cfg)


def _config_from_doc(doc):
    if "channels" in doc:
        doc = dict(doc, channels=tuple(doc["channels"]))
    return ModelConfig(**doc)


def save_checkpoint(params, path):
    cfg_bytes = canonical_json(_config_doc(params.cfg)).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    for name, tensor in params.registry.items():
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", tensor.data.ndim))
        chunks.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path):
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise DataError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (cfg_len,) = take("<I")
    try:
        cfg = _config_from_doc(json.loads(blob[off : off + cfg_len].decode("utf-8")))
    except (json.JSONDecodeError, TypeError) as exc:
        raise DataError(f"{path}: bad embedded config: {exc}") from None
    off += cfg_len

    params = init_params(cfg, seed=0)
    for name, tensor in params.registry.items():
        (name_len,) = take("<I")
        stored = blob[off : off + name_len].decode("utf-8")
        off += name_len
        if stored != name:
            raise DataError(
                f"{path}: parameter order mismatch, expected {name!r}, found {stored!r}"
            )
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        if shape != tensor.data.shape:
            raise DataError(
                f"{path}: {name} has shape {shape}, expected {tensor.data.shape}"
            )
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        if data.size != count:
            raise DataError(f"{path}: truncated data for {name}")
        off += count * 8
        tensor.data = data.reshape(shape).astype(np.float64)
    return params
