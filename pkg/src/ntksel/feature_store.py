"""Bit-exact binary container for gradient features and embeddings.

This format is the contract between the in-process engine and any external
feature exporter, so the layout is deliberately boring: little-endian,
float32 vectors, length-prefixed ids, no compression, no timestamps.

File layout::

    header (44 bytes fixed + extension):
        magic             8 bytes  b"NTKSEL01"
        kind              u16      1=gradient 2=embedding 3=kernel 4=toynet
        flags             u16      bit0: vectors already divided by seq_len
                                   bit1: vectors already multiplied by grad_scale
        dim               u32      vector length of every record
        count             u64      number of records
        proj_seed         u64      sign-generator seed (0 when not projected)
        source_param_dim  u64      pre-projection gradient length (0 for embeddings)
        ext_len           u32      kind-specific extension byte count
        ext               bytes    kernel: column id list; toynet: JSON metadata
    record (count times):
        tag_len           u16
        tag               utf-8 bytes
        index             u64
        seq_len           u32      1 for embeddings and kernel rows
        vector            dim * f32

Normalization (divide by seq_len) and scaling are applied before writing,
and the flags record that, so a consumer can detect double application.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Union

import numpy as np

from .domain import SampleId
from .errors import (
    BadMagic,
    CountMismatch,
    DimMismatch,
    DuplicateId,
    IoError,
    NonFiniteValue,
    StoreError,
    TruncatedFile,
)

__all__ = [
    "MAGIC",
    "KINDS",
    "FeatureFileHeader",
    "FeatureRecord",
    "EmbeddingRecord",
    "write_features",
    "read_features",
    "read_all",
    "encode_id_list",
    "decode_id_list",
]

MAGIC = b"NTKSEL01"
KINDS = {"gradient": 1, "embedding": 2, "kernel": 3, "toynet": 4}
_KIND_NAMES = {v: k for k, v in KINDS.items()}

_HEADER_FMT = "<8sHHIQQQI"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)

FLAG_SEQ_NORMALIZED = 1
FLAG_GRAD_SCALED = 2


@dataclass
class FeatureFileHeader:
    """Parsed or to-be-written container header."""

    kind: str
    dim: int
    count: int
    proj_seed: int = 0
    source_param_dim: int = 0
    seq_len_normalized: bool = False
    grad_scaled: bool = False
    extension: bytes = b""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StoreError(f"unknown container kind {self.kind!r}")
        if self.dim <= 0:
            raise DimMismatch(f"header dim must be positive, got {self.dim}")
        if self.count < 0:
            raise StoreError(f"header count must be non-negative, got {self.count}")

    def pack(self) -> bytes:
        flags = (FLAG_SEQ_NORMALIZED if self.seq_len_normalized else 0) | (
            FLAG_GRAD_SCALED if self.grad_scaled else 0
        )
        return (
            struct.pack(
                _HEADER_FMT,
                MAGIC,
                KINDS[self.kind],
                flags,
                self.dim,
                self.count,
                self.proj_seed,
                self.source_param_dim,
                len(self.extension),
            )
            + self.extension
        )


@dataclass(eq=False)
class FeatureRecord:
    """One sample's stored vector: projected, normalized gradient feature."""

    id: SampleId
    seq_len: int
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise DimMismatch(f"record vector must be 1-d, got {self.vector.shape}")
        if self.seq_len < 1:
            raise StoreError(f"seq_len must be >= 1, got {self.seq_len}")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FeatureRecord)
            and self.id == other.id
            and self.seq_len == other.seq_len
            and self.vector.shape == other.vector.shape
            and bool(np.all(self.vector == other.vector))
        )


@dataclass(eq=False)
class EmbeddingRecord:
    """One sample's mean final-layer hidden state."""

    id: SampleId
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise DimMismatch(f"record vector must be 1-d, got {self.vector.shape}")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingRecord)
            and self.id == other.id
            and self.vector.shape == other.vector.shape
            and bool(np.all(self.vector == other.vector))
        )


Record = Union[FeatureRecord, EmbeddingRecord]


def _pack_sample_id(sid: SampleId) -> bytes:
    tag = sid.dataset_tag.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise StoreError(f"dataset tag too long ({len(tag)} bytes)")
    return struct.pack("<H", len(tag)) + tag + struct.pack("<Q", sid.index)


def encode_id_list(ids: list[SampleId]) -> bytes:
    """Serialize a sample-id list (used by kernel-container extensions)."""
    out = io.BytesIO()
    out.write(struct.pack("<I", len(ids)))
    for sid in ids:
        out.write(_pack_sample_id(sid))
    return out.getvalue()


def decode_id_list(data: bytes) -> list[SampleId]:
    buf = io.BytesIO(data)
    (n,) = struct.unpack("<I", _read_exact(buf, 4, "id list"))
    ids = []
    for _ in range(n):
        (tag_len,) = struct.unpack("<H", _read_exact(buf, 2, "id list"))
        tag = _read_exact(buf, tag_len, "id list").decode("utf-8")
        (index,) = struct.unpack("<Q", _read_exact(buf, 8, "id list"))
        ids.append(SampleId(tag, index))
    return ids


def write_features(
    path, header: FeatureFileHeader, records: Iterable[Record]
) -> str:
    """Stream records into a container file; returns its SHA-256 hex digest.

    Validates dimension, finiteness, and id uniqueness as records stream by;
    the partially written file is removed on any validation failure.
    """
    hasher = hashlib.sha256()
    seen: set[SampleId] = set()
    written = 0
    try:
        f = open(path, "wb")
    except OSError as e:
        raise IoError(str(e)) from e
    try:
        with f:

            def emit(data: bytes):
                hasher.update(data)
                f.write(data)

            emit(header.pack())
            for rec in records:
                vec = rec.vector
                if vec.shape[0] != header.dim:
                    raise DimMismatch(
                        f"record {rec.id} has dim {vec.shape[0]}, header says {header.dim}"
                    )
                if not np.isfinite(vec).all():
                    raise NonFiniteValue(f"record {rec.id} contains non-finite entries")
                if rec.id in seen:
                    raise DuplicateId(f"duplicate record id {rec.id}")
                seen.add(rec.id)
                seq_len = getattr(rec, "seq_len", 1)
                emit(_pack_sample_id(rec.id))
                emit(struct.pack("<I", seq_len))
                emit(vec.astype("<f4", copy=False).tobytes())
                written += 1
            if written != header.count:
                raise CountMismatch(
                    f"header declares {header.count} records, stream held {written}"
                )
    except Exception:
        import os

        try:
            os.unlink(path)
        except OSError:
            pass
        raise
    return hasher.hexdigest()


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFile(f"unexpected end of data while reading {what}")
    return data


def _parse_header(f) -> FeatureFileHeader:
    raw = f.read(_HEADER_SIZE)
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagic("not a feature container (bad magic)")
    if len(raw) != _HEADER_SIZE:
        raise TruncatedFile("header truncated")
    _, kind_code, flags, dim, count, proj_seed, source_dim, ext_len = struct.unpack(
        _HEADER_FMT, raw
    )
    if kind_code not in _KIND_NAMES:
        raise StoreError(f"unknown kind code {kind_code}")
    ext = _read_exact(f, ext_len, "header extension") if ext_len else b""
    return FeatureFileHeader(
        kind=_KIND_NAMES[kind_code],
        dim=dim,
        count=count,
        proj_seed=proj_seed,
        source_param_dim=source_dim,
        seq_len_normalized=bool(flags & FLAG_SEQ_NORMALIZED),
        grad_scaled=bool(flags & FLAG_GRAD_SCALED),
        extension=ext,
    )


def read_features(path) -> tuple[FeatureFileHeader, Iterator[Record]]:
    """Open a container; returns its header and a lazy record iterator.

    Header invariants are verified before the first record is yielded; the
    iterator holds the file open and reads one record at a time.
    """
    try:
        f = open(path, "rb")
    except OSError as e:
        raise IoError(str(e)) from e
    try:
        header = _parse_header(f)
    except Exception:
        f.close()
        raise

    def records() -> Iterator[Record]:
        vec_bytes = header.dim * 4
        with f:
            for _ in range(header.count):
                (tag_len,) = struct.unpack("<H", _read_exact(f, 2, "record id"))
                tag = _read_exact(f, tag_len, "record id").decode("utf-8")
                (index,) = struct.unpack("<Q", _read_exact(f, 8, "record id"))
                (seq_len,) = struct.unpack("<I", _read_exact(f, 4, "record seq_len"))
                vec = np.frombuffer(
                    _read_exact(f, vec_bytes, "record vector"), dtype="<f4"
                ).copy()
                if not np.isfinite(vec).all():
                    raise NonFiniteValue(f"record {tag}:{index} contains non-finite entries")
                sid = SampleId(tag, index)
                if header.kind == "embedding":
                    yield EmbeddingRecord(sid, vec)
                else:
                    yield FeatureRecord(sid, seq_len, vec)
            if f.read(1) != b"":
                raise StoreError("trailing bytes after final record")

    return header, records()


def read_all(path) -> tuple[FeatureFileHeader, list[Record]]:
    """Eagerly read a whole container."""
    header, it = read_features(path)
    return header, list(it)
