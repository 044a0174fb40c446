"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"SPTCKPT\\x00"
    version    u32
    meta_len   u64, then meta_len bytes of UTF-8 JSON {"config", "seed", "extra"}
    count      u32, then per tensor:
                   name_len u16, name (UTF-8), ndim u8, dims u64 * ndim,
                   data f64 * prod(dims), row-major
    crc32      u32 over every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SPTCKPT\x00"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Bad magic, unsupported version, or checksum mismatch."""


class CheckpointTruncatedError(OSError):
    def __init__(self, offset: int, need: int, size: int):
        super().__init__(f"checkpoint truncated at offset {offset}: need {need} bytes, file has {size}")
        self.offset = offset


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    seed: int | None = None
    extra: dict = field(default_factory=dict)
    version: int = VERSION


def _as_array(t) -> np.ndarray:
    data = getattr(t, "data", t)
    return np.asarray(data, dtype="<f8").copy(order="C")


def encode_checkpoint(tensors: dict, config: dict | None = None, seed: int | None = None, extra: dict | None = None) -> bytes:
    meta = json.dumps({"config": config or {}, "seed": seed, "extra": extra or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = _as_array(t)
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, tensors: dict, config: dict | None = None, seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, config, seed, extra))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(self.pos, n, len(self.buf))
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("bad magic header")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<Q")
    meta_raw = r.take(meta_len)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen)
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(nbytes), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name.decode(errors="replace")] = data
    end = r.pos
    (crc,) = r.unpack("<I")
    if zlib.crc32(buf[:end]) != crc:
        raise CheckpointFormatError("checksum mismatch: checkpoint is corrupt")
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after checksum")
    try:
        meta = json.loads(meta_raw)
    except ValueError as exc:
        raise CheckpointFormatError(f"unreadable metadata: {exc}") from None
    return Checkpoint(tensors, meta.get("config", {}), meta.get("seed"), meta.get("extra", {}), version)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
