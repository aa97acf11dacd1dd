"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"RDGCKPT\\0"
    version      u32       FORMAT_VERSION
    meta_len     u32
    meta         meta_len bytes, UTF-8 JSON, sorted keys, compact separators:
                 {"model_config": ..., "input_stats": ..., "train": ...}
    n_tensors    u32
    n_tensors x:
        name_len u16, name (UTF-8)
        role     u8  (0 weight, 1 bias, 2 memory)
        ndim     u8, dims u32 x ndim
        payload  float32 LE, C order, prod(dims) values
    checksum     32 bytes  SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import ParamTensor
from .net import Model, ModelConfig
from .projection import InputStats

MAGIC = b"RDGCKPT\x00"
FORMAT_VERSION = 1
ROLES = ("weight", "bias", "memory")


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: Model
    input_stats: InputStats
    train: dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def encode(ckpt: Checkpoint) -> bytes:
    meta = _canonical({
        "model_config": ckpt.model.cfg.to_dict(),
        "input_stats": ckpt.input_stats.to_dict(),
        "train": ckpt.train,
    })
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(meta))
    out += meta
    out += struct.pack("<I", len(ckpt.model.params))
    for name, p in ckpt.model.params.items():
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", ROLES.index(p.role), p.value.ndim)
        out += struct.pack(f"<{p.value.ndim}I", *p.value.shape)
        out += np.ascontiguousarray(p.value, dtype="<f4").tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 8 + 32 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic or truncated)")
    (version,) = struct.unpack_from("<I", buf, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError("checkpoint checksum mismatch (file corrupted)")
    try:
        pos = len(MAGIC) + 4
        (meta_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            role, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            tensors[name] = (ROLES[role], arr.astype(np.float32))
        if pos != len(body):
            raise CheckpointFormatError(f"{len(body) - pos} trailing bytes after tensor table")
    except (struct.error, ValueError, IndexError, KeyError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointFormatError(f"malformed checkpoint: {e}") from e

    model = Model(ModelConfig.from_dict(meta["model_config"]), seed=0)
    expected = {k: p.shape for k, p in model.params.items()}
    got = {k: v[1].shape for k, v in tensors.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        bad = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise CheckpointShapeError(
            f"tensor table does not match model config (missing {missing}, extra {extra}, wrong shape {bad})")
    model.params = {k: ParamTensor(tensors[k][1].copy(), tensors[k][0]) for k in model.params}
    return Checkpoint(model, InputStats.from_dict(meta["input_stats"]), meta.get("train", {}))


def save_checkpoint(path: Path, ckpt: Checkpoint) -> bytes:
    data = encode(ckpt)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path: Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
