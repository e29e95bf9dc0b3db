"""Seeded sign-matrix random projection, generated on the fly.

The implicit projection matrix has independent +/-1 entries and is never
materialized: any entry ``(i, k)`` is recomputed in O(1) from
``(seed, i, k)`` by a counter-based mixing function, so projection is
stateless, order-independent, and reproducible across processes and
languages.

Generator contract (shared with external feature exporters, see
``docs/projection_contract.md``):

* ``word(seed, i, b)`` = ``mix64(mix64(seed XOR i*0xD1B54A32D192ED03) XOR
  b*0x8CB92BA72F3D8DD7)`` with all arithmetic modulo 2^64, where ``mix64``
  is the splitmix64 finalizer.
* The sign at row ``i``, column ``k`` is taken from bit ``k mod 64`` of
  ``word(seed, i, k div 64)``: bit 0 maps to +1, bit 1 to -1.
* Projection accumulates in float64 over fixed row tiles of ``ROW_TILE``
  rows, folded in ascending tile order, which makes the result exactly
  independent of how callers chunk the input vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from .errors import CoverageError, DimMismatch, OverlapError

__all__ = [
    "ProjectionSpec",
    "ROW_TILE",
    "sign",
    "sign_tile",
    "project",
    "project_batch",
    "project_chunked",
    "ChunkedProjector",
]

# Rows per accumulation tile. Part of the bit-exactness contract: changing it
# changes last-ulp accumulation order of every projected feature.
ROW_TILE = 4096

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_ROW_SALT = 0xD1B54A32D192ED03
_BLOCK_SALT = 0x8CB92BA72F3D8DD7
_MIX_INC = 0x9E3779B97F4A7C15
_MIX_M1 = 0xBF58476D1CE4E5B9
_MIX_M2 = 0x94D049BB133111EB


def _mix64_scalar(x: int) -> int:
    """splitmix64 finalizer on a python int (reference path)."""
    m = (1 << 64) - 1
    z = (x + _MIX_INC) & m
    z = ((z ^ (z >> 30)) * _MIX_M1) & m
    z = ((z ^ (z >> 27)) * _MIX_M2) & m
    return z ^ (z >> 31)


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    z = (x + np.uint64(_MIX_INC)) & _MASK64
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(_MIX_M1)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(_MIX_M2)) & _MASK64
    return z ^ (z >> np.uint64(31))


def sign(seed: int, i: int, k: int) -> int:
    """Entry (i, k) of the implicit sign matrix for ``seed``: +1 or -1."""
    m = (1 << 64) - 1
    h = _mix64_scalar(seed ^ ((i * _ROW_SALT) & m))
    word = _mix64_scalar(h ^ (((k >> 6) * _BLOCK_SALT) & m))
    return 1 - 2 * ((word >> (k & 63)) & 1)


def sign_tile(seed: int, row_start: int, n_rows: int, n_cols: int) -> np.ndarray:
    """Dense float64 block of sign-matrix entries, rows [row_start, row_start+n_rows).

    Equals ``sign(seed, i, k)`` elementwise; vectorized for tile-sized blocks.
    """
    n_blocks = (n_cols + 63) >> 6
    rows = np.arange(row_start, row_start + n_rows, dtype=np.uint64)
    h = _mix64((rows * np.uint64(_ROW_SALT)) ^ np.uint64(seed))
    blocks = np.arange(n_blocks, dtype=np.uint64) * np.uint64(_BLOCK_SALT)
    words = _mix64(h[:, None] ^ blocks[None, :])
    # little-endian byte view puts bit (k mod 64) at unpacked position k
    raw = words.astype("<u8", copy=False).reshape(n_rows, n_blocks).view(np.uint8)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, :n_cols]
    signs = bits.astype(np.float64)
    signs *= -2.0
    signs += 1.0
    return signs


@dataclass(frozen=True)
class ProjectionSpec:
    """Identity of one implicit projection: seed, shape, and scaling.

    ``raw`` entries are exactly +/-1 (the selection pipeline's mode);
    ``jl_scaled`` entries are +/-1/sqrt(target_dim), which makes projected
    inner products unbiased estimates of the originals.
    """

    seed: int
    source_dim: int
    target_dim: int
    scale_mode: Literal["raw", "jl_scaled"] = "raw"

    def __post_init__(self):
        if self.source_dim <= 0 or self.target_dim <= 0:
            raise DimMismatch(
                f"projection dims must be positive, got {self.source_dim}x{self.target_dim}"
            )
        if not (0 <= self.seed < 2**64):
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")
        if self.scale_mode not in ("raw", "jl_scaled"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")

    @property
    def output_scale(self) -> float:
        return 1.0 / np.sqrt(self.target_dim) if self.scale_mode == "jl_scaled" else 1.0


def project_batch(spec: ProjectionSpec, G: np.ndarray) -> np.ndarray:
    """Project each row of ``G`` (n, source_dim) to (n, target_dim).

    float64 accumulation over ROW_TILE tiles in ascending order; the single
    vector and chunked entry points reduce to this same tile pipeline.
    """
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] != spec.source_dim:
        raise DimMismatch(
            f"expected (n, {spec.source_dim}) input, got {G.shape}"
        )
    acc = np.zeros((G.shape[0], spec.target_dim), dtype=np.float64)
    for lo in range(0, spec.source_dim, ROW_TILE):
        hi = min(lo + ROW_TILE, spec.source_dim)
        tile = sign_tile(spec.seed, lo, hi - lo, spec.target_dim)
        acc += np.ascontiguousarray(G[:, lo:hi]) @ tile
    if spec.scale_mode == "jl_scaled":
        acc *= spec.output_scale
    return acc


def project(spec: ProjectionSpec, g: np.ndarray) -> np.ndarray:
    """Project one source_dim vector to target_dim."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.shape[0] != spec.source_dim:
        raise DimMismatch(f"expected length-{spec.source_dim} vector, got shape {g.shape}")
    return project_batch(spec, g[None, :])[0]


class ChunkedProjector:
    """Streaming projection of one vector delivered as (offset, slice) chunks.

    Chunks may arrive in any order and any partitioning; the result is
    bit-identical to ``project`` on the concatenated vector because staging
    is tile-aligned and tiles are folded in ascending index order.
    """

    def __init__(self, spec: ProjectionSpec):
        self.spec = spec
        self._n_tiles = -(-spec.source_dim // ROW_TILE)
        self._acc = np.zeros(spec.target_dim, dtype=np.float64)
        self._staging: dict[int, np.ndarray] = {}
        self._filled: dict[int, np.ndarray] = {}
        self._fill_count: dict[int, int] = {}
        self._pending: dict[int, np.ndarray] = {}
        self._next_fold = 0
        self._done = False

    def _tile_len(self, t: int) -> int:
        return min(ROW_TILE, self.spec.source_dim - t * ROW_TILE)

    def add(self, offset: int, values: np.ndarray) -> None:
        if self._done:
            raise RuntimeError("projector already finalized")
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise DimMismatch(f"chunk must be 1-d, got shape {values.shape}")
        if offset < 0 or offset + values.shape[0] > self.spec.source_dim:
            raise DimMismatch(
                f"chunk [{offset}, {offset + values.shape[0]}) outside "
                f"[0, {self.spec.source_dim})"
            )
        pos = offset
        remaining = values
        while remaining.shape[0] > 0:
            t = pos // ROW_TILE
            t_lo = t * ROW_TILE
            within = pos - t_lo
            take = min(remaining.shape[0], self._tile_len(t) - within)
            if t not in self._staging:
                self._staging[t] = np.zeros(self._tile_len(t), dtype=np.float64)
                self._filled[t] = np.zeros(self._tile_len(t), dtype=bool)
                self._fill_count[t] = 0
            filled = self._filled[t]
            if filled[within : within + take].any():
                raise OverlapError(f"chunk overlaps already-covered indices near {pos}")
            self._staging[t][within : within + take] = remaining[:take]
            filled[within : within + take] = True
            self._fill_count[t] += take
            if self._fill_count[t] == self._tile_len(t):
                self._complete_tile(t)
            pos += take
            remaining = remaining[take:]

    def _complete_tile(self, t: int) -> None:
        buf = self._staging.pop(t)
        del self._filled[t]
        tile = sign_tile(self.spec.seed, t * ROW_TILE, buf.shape[0], self.spec.target_dim)
        self._pending[t] = buf[None, :] @ tile
        while self._next_fold in self._pending:
            self._acc += self._pending.pop(self._next_fold)[0]
            self._next_fold += 1

    def finalize(self) -> np.ndarray:
        if self._done:
            raise RuntimeError("projector already finalized")
        if self._next_fold != self._n_tiles:
            for t in range(self._n_tiles):
                if self._fill_count.get(t, 0) != self._tile_len(t):
                    missing = t * ROW_TILE
                    if t in self._filled:
                        missing += int(np.argmin(self._filled[t]))
                    raise CoverageError(
                        f"source index {missing} never covered by any chunk"
                    )
        self._done = True
        if self.spec.scale_mode == "jl_scaled":
            self._acc *= self.spec.output_scale
        return self._acc


def project_chunked(
    spec: ProjectionSpec, g_chunks: Iterable[tuple[int, np.ndarray]]
) -> np.ndarray:
    """Project a vector delivered as a stream of (offset, slice) chunks.

    Chunks must cover [0, source_dim) exactly once, in any order. Equals
    ``project`` on the concatenated vector exactly.
    """
    proj = ChunkedProjector(spec)
    for offset, values in g_chunks:
        proj.add(offset, values)
    return proj.finalize()
