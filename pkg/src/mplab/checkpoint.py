"""Binary checkpoint container (``.mpck``).

Layout, all integers little-endian::

    b"MPCK" | version u16 | tensor count u32
    per tensor: name length u16 | UTF-8 name | dtype u8 (0=f32, 1=f64) | ndim u8 | dims u32 * ndim | raw values
    JSON length u32 | UTF-8 JSON metadata (config snapshot, counters, RNG state)
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MPCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<HI", VERSION, len(self.tensors))]
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            if arr.ndim > 255:
                raise CheckpointError(f"tensor {name!r} has too many dimensions")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
        blob = json.dumps(self.meta, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<I", len(blob)) + blob)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        r = _Reader(buf)
        if r.take(4, "magic") != MAGIC:
            raise BadMagicError("bad magic: not an MPCK checkpoint")
        version, count = r.unpack("<HI", "header")
        if version != VERSION:
            raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {VERSION})")
        tensors = {}
        for _ in range(count):
            (nlen,) = r.unpack("<H", "tensor name length")
            name = r.take(nlen, "tensor name").decode("utf-8")
            code, ndim = r.unpack("<BB", f"header of {name!r}")
            if code not in _DTYPES:
                raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
            shape = r.unpack(f"<{ndim}I", f"shape of {name!r}")
            dt = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64))
            data = r.take(n * dt.itemsize, f"data of {name!r}")
            tensors[name] = np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        (blen,) = r.unpack("<I", "metadata length")
        meta = json.loads(r.take(blen, "metadata").decode("utf-8"))
        if r.pos != len(buf):
            raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after metadata")
        return cls(tensors, meta)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
