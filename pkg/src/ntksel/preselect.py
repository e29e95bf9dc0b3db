"""Coarse-grained pre-selection: KNN relevance counting over embeddings.

A candidate's relevance is the number of domain points whose K nearest
candidates (Euclidean) include it; the pre-selected pool keeps the M most
relevant candidates. Ties at the K-th distance, and ties in relevance
counts, break by ascending sample id so every stage is deterministic.

Both the reference implementation and the tree-accelerated one rank
candidates by the same squared-distance formula, so their outputs match
exactly on any input, duplicated points included.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .domain import SampleId
from .errors import ConfigError, DimMismatch, EmptyCandidates, MTooLarge
from .feature_store import EmbeddingRecord

__all__ = [
    "RelevanceTable",
    "knn_relevance",
    "accelerated_knn_relevance",
    "top_m",
]


@dataclass
class RelevanceTable:
    """Per-candidate relevance counts, candidates ordered by sample id."""

    cand_ids: list[SampleId]
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (len(self.cand_ids),):
            raise DimMismatch("counts length differs from candidate count")

    def to_json(self) -> str:
        return json.dumps(
            {str(cid): int(c) for cid, c in zip(self.cand_ids, self.counts)},
            sort_keys=True,
            indent=2,
        ) + "\n"


def _embedding_matrix(records: list[EmbeddingRecord]):
    recs = sorted(records, key=lambda r: r.id)
    ids = [r.id for r in recs]
    mat = np.stack([r.vector for r in recs]).astype(np.float64) if recs else np.zeros((0, 0))
    return ids, mat


def _check_inputs(domain_emb, cand_emb, k):
    if not cand_emb:
        raise EmptyCandidates("candidate embedding set is empty")
    dims = {r.vector.shape[0] for r in cand_emb} | {r.vector.shape[0] for r in domain_emb}
    if len(dims) > 1:
        raise DimMismatch(f"mixed embedding dims {sorted(dims)}")
    if k > len(cand_emb):
        raise ConfigError(f"knn_k={k} exceeds candidate count {len(cand_emb)}")
    if k < 1:
        raise ConfigError(f"knn_k must be >= 1, got {k}")


def _sq_dists(cands: np.ndarray, point: np.ndarray) -> np.ndarray:
    # reference distance formula; the accelerated path re-ranks with this too
    diff = cands - point[None, :]
    return np.einsum("ij,ij->i", diff, diff)


def knn_relevance(
    domain_emb: list[EmbeddingRecord], cand_emb: list[EmbeddingRecord], k: int
) -> RelevanceTable:
    """Reference relevance counting: exhaustive distances per domain point."""
    _check_inputs(domain_emb, cand_emb, k)
    cand_ids, c_mat = _embedding_matrix(cand_emb)
    counts = np.zeros(len(cand_ids), dtype=np.int64)
    for rec in domain_emb:
        d2 = _sq_dists(c_mat, np.asarray(rec.vector, dtype=np.float64))
        # primary key distance, secondary key position == ascending id
        order = np.lexsort((np.arange(len(cand_ids)), d2))
        counts[order[:k]] += 1
    return RelevanceTable(cand_ids, counts)


def accelerated_knn_relevance(
    domain_emb: list[EmbeddingRecord], cand_emb: list[EmbeddingRecord], k: int
) -> RelevanceTable:
    """Tree-pruned exact variant; output is identical to ``knn_relevance``.

    A KD-tree proposes each domain point's K-th neighbor distance; all
    candidates within that (slightly inflated) radius are then re-ranked by
    the reference squared-distance formula with the id tie-break, which makes
    membership decisions independent of the tree's internal arithmetic.
    """
    _check_inputs(domain_emb, cand_emb, k)
    cand_ids, c_mat = _embedding_matrix(cand_emb)
    counts = np.zeros(len(cand_ids), dtype=np.int64)
    if not domain_emb:
        return RelevanceTable(cand_ids, counts)
    d_mat = np.stack([np.asarray(r.vector, dtype=np.float64) for r in domain_emb])
    tree = cKDTree(c_mat)
    kth = tree.query(d_mat, k=k)[0]
    kth = kth[:, -1] if kth.ndim == 2 else kth
    for i in range(d_mat.shape[0]):
        radius = kth[i] * (1.0 + 1e-9) + 1e-300
        ball = tree.query_ball_point(d_mat[i], radius)
        if len(ball) < k:  # radius undershoot cannot happen, but stay exact
            ball = np.arange(len(cand_ids))
        idx = np.asarray(sorted(ball), dtype=np.intp)
        d2 = _sq_dists(c_mat[idx], d_mat[i])
        order = np.lexsort((idx, d2))
        counts[idx[order[:k]]] += 1
    return RelevanceTable(cand_ids, counts)


def top_m(table: RelevanceTable, m: int) -> list[SampleId]:
    """The m most relevant candidate ids, sorted by (count desc, id asc)."""
    if m > len(table.cand_ids):
        raise MTooLarge(f"M={m} exceeds candidate count {len(table.cand_ids)}")
    if m < 0:
        raise MTooLarge(f"M must be non-negative, got {m}")
    order = sorted(
        range(len(table.cand_ids)),
        key=lambda j: (-int(table.counts[j]), table.cand_ids[j]),
    )
    return [table.cand_ids[j] for j in order[:m]]
