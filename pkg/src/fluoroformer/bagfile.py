"""On-disk bag format and cohort manifest.

Bag layout (all integers little-endian)::

    b"FLBG"                       magic
    u32 version                   currently 1
    u32 K, u32 M, u32 d_emb
    M x (u32 length, UTF-8 bytes) channel names
    K x 2 u32                     patch grid coords (row, col)
    float32 [K][M][d_emb]         embeddings, row-major
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numerics as nx
from .fusion import EmbeddedBag

MAGIC = b"FLBG"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
MANIFEST_COLUMNS = ("sample_id", "patient_id", "time_days", "censored", "bag_path")


class FormatError(ValueError):
    """Malformed, truncated or incompatible file."""


@dataclass
class BagFile:
    embeddings: np.ndarray  # float32 (K, M, d_emb)
    coords: np.ndarray  # uint32 (K, 2)
    channel_names: tuple[str, ...]
    version: int = VERSION

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype="<f4")
        if self.embeddings.ndim != 3:
            raise FormatError(f"embeddings must be 3-d, got {self.embeddings.shape}")
        self.coords = np.ascontiguousarray(np.asarray(self.coords).reshape(-1, 2), dtype="<u4")
        self.channel_names = tuple(self.channel_names)
        K, M, _ = self.embeddings.shape
        if len(self.coords) != K:
            raise FormatError(f"{len(self.coords)} coords for {K} patches")
        if len(self.channel_names) != M:
            raise FormatError(f"{len(self.channel_names)} channel names for {M} channels")

    @classmethod
    def from_bag(cls, bag: EmbeddedBag) -> "BagFile":
        names = bag.channel_names or tuple(f"ch{i}" for i in range(bag.n_markers))
        return cls(bag.H.data.astype(np.float32), bag.coords, names)

    def to_bag(self, sample_id: str = "") -> EmbeddedBag:
        return EmbeddedBag(nx.tensor(self.embeddings.astype(nx.get_dtype())), self.coords.astype(np.int64),
                           sample_id, self.channel_names)

    def to_bytes(self) -> bytes:
        K, M, d = self.embeddings.shape
        parts = [_HEADER.pack(MAGIC, self.version, K, M, d)]
        for name in self.channel_names:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        parts.append(self.coords.tobytes())
        parts.append(self.embeddings.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BagFile":
        if len(data) < _HEADER.size:
            raise FormatError("truncated bag header")
        magic, version, K, M, d = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported bag version {version}")
        pos = _HEADER.size
        names = []
        for _ in range(M):
            if pos + 4 > len(data):
                raise FormatError("truncated channel names")
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise FormatError("truncated channel names")
            try:
                names.append(data[pos:pos + n].decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise FormatError(f"channel name is not UTF-8: {exc}") from None
            pos += n
        n_coords = K * 2 * 4
        n_payload = K * M * d * 4
        if len(data) - pos != n_coords + n_payload:
            raise FormatError(f"expected {n_coords + n_payload} bytes after header, found {len(data) - pos}")
        coords = np.frombuffer(data, dtype="<u4", count=K * 2, offset=pos).reshape(K, 2)
        emb = np.frombuffer(data, dtype="<f4", count=K * M * d, offset=pos + n_coords).reshape(K, M, d)
        return cls(emb.copy(), coords.copy(), tuple(names), version)


def write_bag(path: str | Path, bag: BagFile | EmbeddedBag) -> Path:
    if isinstance(bag, EmbeddedBag):
        bag = BagFile.from_bag(bag)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bag.to_bytes())
    return path


def read_bag(path: str | Path) -> BagFile:
    path = Path(path)
    try:
        return BagFile.from_bytes(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def load_bag(path: str | Path, sample_id: str | None = None) -> EmbeddedBag:
    path = Path(path)
    return read_bag(path).to_bag(sample_id if sample_id is not None else path.stem)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    patient_id: str
    time_days: float
    censored: int
    bag_path: str

    @property
    def has_outcome(self) -> bool:
        return not math.isnan(self.time_days) and self.censored in (0, 1)


def write_manifest(path: str | Path, rows: Iterable[ManifestRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in rows:
            time = "" if math.isnan(r.time_days) else repr(float(r.time_days))
            censored = "" if r.censored not in (0, 1) else str(r.censored)
            writer.writerow([r.sample_id, r.patient_id, time, censored, r.bag_path])
    return path


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: manifest missing columns {sorted(missing)}")
        rows = []
        for i, rec in enumerate(reader, start=2):
            try:
                time = float(rec["time_days"]) if rec["time_days"].strip() else math.nan
                censored = int(rec["censored"]) if rec["censored"].strip() else -1
            except ValueError as exc:
                raise FormatError(f"{path}:{i}: {exc}") from None
            if censored not in (-1, 0, 1):
                raise FormatError(f"{path}:{i}: censored must be 0 or 1")
            rows.append(ManifestRow(rec["sample_id"], rec["patient_id"], time, censored, rec["bag_path"]))
    ids = [r.sample_id for r in rows]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate sample ids")
    return rows
