"""Versioned binary checkpoints.

Layout (all integers little-endian): magic bytes `GSSL`, u32 format
version, u64 training step, u64 optimizer step, a length-prefixed UTF-8
config echo, a length-prefixed JSON snapshot of the random-generator
state, then a tensor table of u32 count entries, each holding
(u32 name length, name bytes, u32 rank, u32 dims..., row-major float64
little-endian payload). Parameters and optimizer moments share the table;
moments carry `adam.m.` / `adam.v.` name prefixes.

Reading is strict: every length is checked before use, so a truncated or
padded file fails cleanly with no partial state, and a reloaded
checkpoint re-serializes to the identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"GSSL"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    step: int
    adam_t: int
    rng_state: dict
    tensors: dict[str, np.ndarray]

    def params(self) -> dict[str, np.ndarray]:
        return {
            k: v.copy() for k, v in self.tensors.items() if not k.startswith("adam.")
        }

    def adam_moments(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        m = {
            k[len("adam.m."):]: v.copy()
            for k, v in self.tensors.items()
            if k.startswith("adam.m.")
        }
        v_ = {
            k[len("adam.v."):]: v.copy()
            for k, v in self.tensors.items()
            if k.startswith("adam.v.")
        }
        return m, v_


def _encode(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQQ", VERSION, ckpt.step, ckpt.adam_t))
    cfg = ckpt.config_text.encode("utf-8")
    out.write(struct.pack("<I", len(cfg)))
    out.write(cfg)
    rng = json.dumps(ckpt.rng_state, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.write(struct.pack("<I", len(rng)))
    out.write(rng)
    out.write(struct.pack("<I", len(ckpt.tensors)))
    for name, array in ckpt.tensors.items():
        data = np.ascontiguousarray(array, dtype="<f8")
        name_b = name.encode("utf-8")
        out.write(struct.pack("<I", len(name_b)))
        out.write(name_b)
        out.write(struct.pack("<I", data.ndim))
        for dim in data.shape:
            out.write(struct.pack("<I", dim))
        out.write(data.tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointError("corrupt payload: unexpected end of file")
        chunk = self.blob[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(_encode(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointError("corrupt payload: bad magic bytes")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    step = reader.u64()
    adam_t = reader.u64()
    config_text = reader.take(reader.u32()).decode("utf-8")
    try:
        rng_state = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError("corrupt payload: bad generator state") from exc
    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        if rank > 8:
            raise CheckpointError(f"corrupt payload: implausible rank {rank}")
        shape = tuple(reader.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = reader.take(8 * count)
        if name in tensors:
            raise CheckpointError(f"corrupt payload: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if reader.pos != len(reader.blob):
        raise CheckpointError("corrupt payload: trailing bytes")
    return Checkpoint(config_text, step, adam_t, rng_state, tensors)
