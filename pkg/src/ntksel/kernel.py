"""Kernel arithmetic: exact and Jacobian-free kernels, diagnostics, assembly.

The Jacobian-free kernel between two samples is the inner product of their
summed-output gradients. Expanding the sum shows it equals the exact
kernel (the per-output gradient inner products) plus cross-output
interaction terms; ``cross_term_diagnostic`` measures how small those cross
terms are and how well the two kernels correlate.

All accumulation is float64. Feature vectors read from disk are float32 and
are widened before any dot product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import feature_store, toy_model
from .domain import SampleId
from .errors import (
    DegenerateVariance,
    DimMismatch,
    EmptyMatrix,
    SeedMismatch,
    ZeroNorm,
)
from .feature_store import FeatureFileHeader, FeatureRecord
from .toy_model import ToyNetwork

__all__ = [
    "KernelMatrix",
    "KernelSnapshot",
    "CrossTermSummary",
    "jf_ntk",
    "exact_ntk",
    "cross_term_diagnostic",
    "frobenius_cos",
    "assemble_kernel_matrix",
    "write_kernel",
    "read_kernel",
]

EPS_DIV = 1e-12

# Fixed assembly tile edge. Each tile is one independent matrix product, so
# any parallel schedule over tiles reproduces the sequential result bit for
# bit; changing this constant changes last-ulp results.
ASSEMBLY_TILE = 256


@dataclass
class KernelMatrix:
    """Dense kernel block between a domain set (rows) and candidates (cols)."""

    row_ids: list[SampleId]
    col_ids: list[SampleId]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.row_ids), len(self.col_ids)):
            raise DimMismatch(
                f"kernel values shaped {self.values.shape}, expected "
                f"({len(self.row_ids)}, {len(self.col_ids)})"
            )


@dataclass
class KernelSnapshot:
    """Symmetric kernel over a fixed probe set at one training step."""

    step: int
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        n, m = self.matrix.shape
        if n != m:
            raise DimMismatch(f"snapshot must be square, got {self.matrix.shape}")


def jf_ntk(u: np.ndarray, v: np.ndarray) -> float:
    """Jacobian-free kernel value: plain float64 inner product."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DimMismatch(f"vector shapes differ: {u.shape} vs {v.shape}")
    return float(np.dot(u, v))


def exact_ntk(net: ToyNetwork, x: np.ndarray, x_other: np.ndarray) -> float:
    """Exact kernel on the adapter subspace: sum of per-output gradient inner products."""
    j_x = toy_model.jacobian(net, x)
    j_y = toy_model.jacobian(net, x_other)
    return sum(jf_ntk(j_x[k], j_y[k]) for k in range(j_x.shape[0]))


@dataclass
class CrossTermSummary:
    """Per-pair gap between the Jacobian-free and exact kernels."""

    median_ratio: float
    max_ratio: float
    pearson_r: float
    n_pairs: int
    ratios: np.ndarray
    jf_values: np.ndarray
    exact_values: np.ndarray


def cross_term_diagnostic(
    net: ToyNetwork,
    pairs: list[tuple[np.ndarray, np.ndarray]],
    eps_div: float = EPS_DIV,
) -> CrossTermSummary:
    """Compare Jacobian-free and exact kernel values over input pairs.

    ratio_i = |jf_i - exact_i| / max(|exact_i|, eps_div). For a single-output
    network the two kernels coincide bitwise and every ratio is exactly zero.
    """
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs for a correlation diagnostic")
    jf_vals = np.empty(len(pairs))
    exact_vals = np.empty(len(pairs))
    for i, (x, y) in enumerate(pairs):
        jf_vals[i] = jf_ntk(
            toy_model.summed_output_gradient(net, x).flat,
            toy_model.summed_output_gradient(net, y).flat,
        )
        exact_vals[i] = exact_ntk(net, x, y)
    if np.ptp(exact_vals) == 0.0 or np.ptp(jf_vals) == 0.0:
        raise DegenerateVariance("kernel values are constant; correlation undefined")
    ratios = np.abs(jf_vals - exact_vals) / np.maximum(np.abs(exact_vals), eps_div)
    r = float(np.corrcoef(jf_vals, exact_vals)[0, 1])
    return CrossTermSummary(
        median_ratio=float(np.median(ratios)),
        max_ratio=float(np.max(ratios)),
        pearson_r=r,
        n_pairs=len(pairs),
        ratios=ratios,
        jf_values=jf_vals,
        exact_values=exact_vals,
    )


def frobenius_cos(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius cosine similarity <a,b>_F / (||a||_F ||b||_F), in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"matrix shapes differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine undefined for zero matrices")
    if np.array_equal(a, b):
        return 1.0  # exact self-similarity, immune to sqrt rounding
    return float(np.clip(np.vdot(a, b) / (na * nb), -1.0, 1.0))


def _feature_matrix(records: list[FeatureRecord]) -> tuple[list[SampleId], np.ndarray]:
    recs = sorted(records, key=lambda r: r.id)
    ids = [r.id for r in recs]
    mat = np.stack([r.vector for r in recs]).astype(np.float64)
    return ids, mat


def tiled_products(d_mat: np.ndarray, c_mat: np.ndarray, tile: int = ASSEMBLY_TILE) -> np.ndarray:
    """All pairwise inner products, computed tile by tile.

    Every (row-block, col-block) tile is a self-contained product into a
    disjoint output region, so tiles can be evaluated in any order (or on any
    worker) with bit-identical results.
    """
    out = np.empty((d_mat.shape[0], c_mat.shape[0]), dtype=np.float64)
    for i0 in range(0, d_mat.shape[0], tile):
        i1 = min(i0 + tile, d_mat.shape[0])
        d_blk = np.ascontiguousarray(d_mat[i0:i1])
        for j0 in range(0, c_mat.shape[0], tile):
            j1 = min(j0 + tile, c_mat.shape[0])
            out[i0:i1, j0:j1] = d_blk @ np.ascontiguousarray(c_mat[j0:j1]).T
    return out


def assemble_kernel_matrix(
    domain_features: list[FeatureRecord],
    cand_features: list[FeatureRecord],
    domain_seed: int | None = None,
    cand_seed: int | None = None,
) -> KernelMatrix:
    """Kernel block values[i][j] = <domain_i, cand_j> over all pairs.

    Rows and columns are ordered by sample id; pass the two file headers'
    projection seeds to enforce that both sides were projected with the same
    implicit sign matrix.
    """
    if not domain_features or not cand_features:
        raise EmptyMatrix("kernel assembly needs non-empty feature sets")
    if domain_seed is not None and cand_seed is not None and domain_seed != cand_seed:
        raise SeedMismatch(
            f"features projected under different seeds: {domain_seed} != {cand_seed}"
        )
    row_ids, d_mat = _feature_matrix(domain_features)
    col_ids, c_mat = _feature_matrix(cand_features)
    if d_mat.shape[1] != c_mat.shape[1]:
        raise DimMismatch(
            f"feature dims differ: {d_mat.shape[1]} vs {c_mat.shape[1]}"
        )
    return KernelMatrix(row_ids, col_ids, tiled_products(d_mat, c_mat))


def write_kernel(path, km: KernelMatrix) -> str:
    """Store a kernel block in the binary container (kind "kernel").

    Column ids ride in the header extension; each row becomes one record at
    float32 container precision.
    """
    header = FeatureFileHeader(
        kind="kernel",
        dim=len(km.col_ids),
        count=len(km.row_ids),
        extension=feature_store.encode_id_list(km.col_ids),
    )
    records = [
        FeatureRecord(rid, 1, km.values[i]) for i, rid in enumerate(km.row_ids)
    ]
    return feature_store.write_features(path, header, records)


def read_kernel(path) -> KernelMatrix:
    header, records = feature_store.read_all(path)
    if header.kind != "kernel":
        raise DimMismatch(f"expected kernel container, got {header.kind}")
    col_ids = feature_store.decode_id_list(header.extension)
    row_ids = [r.id for r in records]
    values = np.stack([r.vector for r in records]).astype(np.float64) if records else (
        np.zeros((0, len(col_ids)))
    )
    return KernelMatrix(row_ids, col_ids, values)
