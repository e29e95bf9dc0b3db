"""Seeded sign projection, reimplemented to the engine's published contract.

This is an independent implementation of the generator specified in the
engine's docs/projection_contract.md: splitmix64-finalizer words keyed by
(seed, row, column-block), 64 signs per word in little-endian bit order,
float64 accumulation over fixed 4096-row tiles folded in ascending order.
The frozen test vectors in the engine pin every byte of this module's
behavior; matching them bit for bit is what makes exported features
consumable by the engine without re-projection.
"""
from __future__ import annotations

import numpy as np

ROW_TILE = 4096

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_ROW_SALT = np.uint64(0xD1B54A32D192ED03)
_BLOCK_SALT = np.uint64(0x8CB92BA72F3D8DD7)


def _mix64(x: np.ndarray) -> np.ndarray:
    z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


def sign_block(seed: int, row_start: int, n_rows: int, n_cols: int) -> np.ndarray:
    """Dense float64 +/-1 block for rows [row_start, row_start + n_rows)."""
    n_words = (n_cols + 63) >> 6
    rows = np.arange(row_start, row_start + n_rows, dtype=np.uint64)
    h = _mix64((rows * _ROW_SALT) ^ np.uint64(seed))
    blocks = np.arange(n_words, dtype=np.uint64) * _BLOCK_SALT
    words = _mix64(h[:, None] ^ blocks[None, :])
    raw = words.astype("<u8", copy=False).view(np.uint8)
    bits = np.unpackbits(raw.reshape(n_rows, -1), axis=1, bitorder="little")[:, :n_cols]
    out = bits.astype(np.float64)
    out *= -2.0
    out += 1.0
    return out


class StreamingProjector:
    """Projects one source vector fed as (offset, values) chunks.

    Stages chunks into the contract's ROW_TILE-aligned buffers, multiplies
    each completed tile once, and folds tile results in ascending order, so
    the float64 output is bit-identical to the engine's whole-vector
    projection regardless of how the caller slices the gradient.
    """

    def __init__(self, seed: int, source_dim: int, target_dim: int):
        self.seed = seed
        self.source_dim = source_dim
        self.target_dim = target_dim
        self._n_tiles = -(-source_dim // ROW_TILE)
        self._acc = np.zeros(target_dim, dtype=np.float64)
        self._staging: dict[int, np.ndarray] = {}
        self._fill: dict[int, int] = {}
        self._pending: dict[int, np.ndarray] = {}
        self._next = 0

    def _tile_len(self, t: int) -> int:
        return min(ROW_TILE, self.source_dim - t * ROW_TILE)

    def add(self, offset: int, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        if offset < 0 or offset + values.shape[0] > self.source_dim:
            raise ValueError(
                f"chunk [{offset}, {offset + values.shape[0]}) outside "
                f"[0, {self.source_dim})"
            )
        pos, rest = offset, values
        while rest.shape[0]:
            t = pos // ROW_TILE
            within = pos - t * ROW_TILE
            take = min(rest.shape[0], self._tile_len(t) - within)
            buf = self._staging.setdefault(
                t, np.zeros(self._tile_len(t), dtype=np.float64)
            )
            buf[within : within + take] = rest[:take]
            self._fill[t] = self._fill.get(t, 0) + take
            if self._fill[t] == self._tile_len(t):
                self._flush_tile(t)
            pos += take
            rest = rest[take:]

    def _flush_tile(self, t: int) -> None:
        buf = self._staging.pop(t)
        tile = sign_block(self.seed, t * ROW_TILE, buf.shape[0], self.target_dim)
        self._pending[t] = buf[None, :] @ tile
        while self._next in self._pending:
            self._acc += self._pending.pop(self._next)[0]
            self._next += 1

    def finalize(self) -> np.ndarray:
        if self._next != self._n_tiles:
            covered = sum(self._fill.values())
            raise ValueError(
                f"gradient stream covered {covered} of {self.source_dim} entries"
            )
        return self._acc
