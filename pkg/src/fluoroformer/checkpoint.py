"""Versioned binary checkpoints.

Layout (little-endian)::

    b"FLCK"                          magic
    u32 version                      currently 1
    u32 n, n bytes                   JSON metadata (config, model dims, bins)
    i32 epoch                        best epoch, -1 for the initial state
    f64 val_cindex                   NaN when undefined
    u32 n_params
    per parameter, sorted by name:
        u32 n, n bytes               UTF-8 name
        u8 dtype                     0 = float32, 1 = float64
        u32 ndim, ndim x u32 dims
        raw values, row-major
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bagfile import FormatError

MAGIC = b"FLCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    epoch: int = -1
    val_cindex: float = math.nan

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta,
                 struct.pack("<idI", self.epoch, self.val_cindex, len(self.state))]
        for name in sorted(self.state):
            arr = np.asarray(self.state[name])
            try:
                code = _CODES[arr.dtype]
            except KeyError:
                raise FormatError(f"{name}: unsupported dtype {arr.dtype}") from None
            raw_name = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw_name)))
            parts.append(raw_name)
            parts.append(struct.pack("<BI", code, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        reader = _Reader(data)
        if reader.take(4) != MAGIC:
            raise FormatError("bad checkpoint magic")
        version, n_meta = reader.unpack("<II")
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        try:
            meta = json.loads(reader.take(n_meta).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint metadata: {exc}") from None
        epoch, val, n_params = reader.unpack("<idI")
        state = {}
        for _ in range(n_params):
            (n,) = reader.unpack("<I")
            name = reader.take(n).decode("utf-8")
            code, ndim = reader.unpack("<BI")
            if code not in _DTYPES:
                raise FormatError(f"{name}: unknown dtype code {code}")
            shape = reader.unpack(f"<{ndim}I")
            dtype = _DTYPES[code]
            count = int(np.prod(shape, dtype=np.int64))
            state[name] = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()
        if reader.pos != len(data):
            raise FormatError(f"{len(data) - reader.pos} trailing bytes in checkpoint")
        return cls(state, meta, epoch, val)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        try:
            return cls.from_bytes(path.read_bytes())
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from None


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))
