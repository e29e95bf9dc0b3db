"""Writer for the engine's binary feature container (magic NTKSEL01).

Independent implementation of the byte layout: little-endian, 44-byte fixed
header plus kind-specific extension, records of [id | seq_len u32 | f32
vector] with ids serialized as u16 tag length + UTF-8 tag + u64 index.
The engine's reader is the authority; the exporter's round-trip tests use
it as the oracle.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

MAGIC = b"NTKSEL01"
KIND_GRADIENT = 1
KIND_EMBEDDING = 2
FLAG_SEQ_NORMALIZED = 1
FLAG_GRAD_SCALED = 2

_HEADER_FMT = "<8sHHIQQQI"


@dataclass
class Record:
    tag: str
    index: int
    seq_len: int
    vector: np.ndarray


def write_container(
    path,
    kind: int,
    dim: int,
    records: Iterable[Record],
    proj_seed: int = 0,
    source_param_dim: int = 0,
    normalized: bool = False,
    scaled: bool = False,
) -> str:
    """Stream records into a container file; returns its SHA-256 hex digest.

    The header's record count is patched after the stream ends, then the
    digest is computed over the final bytes.
    """
    flags = (FLAG_SEQ_NORMALIZED if normalized else 0) | (
        FLAG_GRAD_SCALED if scaled else 0
    )
    count = 0
    with open(path, "wb") as f:
        f.write(struct.pack(_HEADER_FMT, MAGIC, kind, flags, dim, 0,
                            proj_seed, source_param_dim, 0))
        for rec in records:
            vec = np.asarray(rec.vector)
            if vec.shape != (dim,):
                raise ValueError(f"record {rec.tag}:{rec.index} has shape {vec.shape}, want ({dim},)")
            if not np.isfinite(vec).all():
                raise ValueError(f"record {rec.tag}:{rec.index} has non-finite entries")
            tag = rec.tag.encode("utf-8")
            f.write(struct.pack("<H", len(tag)) + tag)
            f.write(struct.pack("<QI", rec.index, rec.seq_len))
            f.write(vec.astype("<f4", copy=False).tobytes())
            count += 1
        f.seek(0)
        f.write(struct.pack(_HEADER_FMT, MAGIC, kind, flags, dim, count,
                            proj_seed, source_param_dim, 0))
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
