"""Fine-grained selection: kernel utility scores and the end-to-end pipeline.

A candidate's utility is its mean kernel value against every domain sample;
the selected subset is the Top-N by utility with ascending-id tie-break.
``run_pipeline`` wires pre-selection, kernel assembly, scoring, and Top-N
together over feature files and emits a run manifest; every stage failure
is re-raised tagged with the stage name.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import feature_store, preselect
from .domain import PipelineConfig, RunManifest, SampleId, sha256_file, validate_config
from .errors import (
    DimMismatch,
    EmptyMatrix,
    NTooLarge,
    SeedMismatch,
    StageError,
)
from .feature_store import EmbeddingRecord, FeatureRecord
from .kernel import KernelMatrix, assemble_kernel_matrix

__all__ = [
    "UtilityScores",
    "SelectionResult",
    "PipelineOutput",
    "utility_scores",
    "select_top_n",
    "run_pipeline",
]


@dataclass
class UtilityScores:
    """Per-candidate mean kernel similarity to the domain set."""

    cand_ids: list[SampleId]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.cand_ids),):
            raise DimMismatch("scores length differs from candidate count")
        if not np.isfinite(self.scores).all():
            raise DimMismatch("utility scores must be finite")


@dataclass
class SelectionResult:
    """Ordered Top-N selection with matching scores."""

    selected: list[SampleId]
    scores: list[float]
    manifest_ref: str = ""

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {"kind": "selection", "n": len(self.selected), "manifest_sha256": self.manifest_ref},
                sort_keys=True,
            )
        ]
        for rank, (sid, score) in enumerate(zip(self.selected, self.scores), start=1):
            lines.append(
                json.dumps({"rank": rank, "id": str(sid), "score": score}, sort_keys=True)
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "SelectionResult":
        lines = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
        head = lines[0]
        sel = [SampleId.parse(d["id"]) for d in lines[1:]]
        scores = [d["score"] for d in lines[1:]]
        return cls(sel, scores, head.get("manifest_sha256", ""))


def utility_scores(km: KernelMatrix) -> UtilityScores:
    """Column means of the kernel block: s_j = mean_i values[i][j]."""
    if km.values.shape[0] == 0 or km.values.shape[1] == 0:
        raise EmptyMatrix("kernel matrix has no rows or columns")
    return UtilityScores(km.col_ids, km.values.mean(axis=0))


def select_top_n(scores: UtilityScores, n: int) -> SelectionResult:
    """Top-N candidates by utility, sorted by (score desc, id asc)."""
    if n > len(scores.cand_ids):
        raise NTooLarge(f"N={n} exceeds scored candidate count {len(scores.cand_ids)}")
    if n < 0:
        raise NTooLarge(f"N must be non-negative, got {n}")
    order = sorted(
        range(len(scores.cand_ids)),
        key=lambda j: (-scores.scores[j], scores.cand_ids[j]),
    )
    picked = order[:n]
    return SelectionResult(
        [scores.cand_ids[j] for j in picked],
        [float(scores.scores[j]) for j in picked],
    )


@dataclass
class PipelineOutput:
    """Everything one pipeline run produced, plus per-stage wall times."""

    result: SelectionResult
    manifest: RunManifest
    relevance: preselect.RelevanceTable
    preselected: list[SampleId]
    scores: UtilityScores
    timings: dict[str, float] = field(default_factory=dict)


def _stage(name: str, fn):
    t0 = time.perf_counter()
    try:
        out = fn()
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e
    return out, time.perf_counter() - t0


def _load_embeddings(path) -> list[EmbeddingRecord]:
    header, records = feature_store.read_features(path)
    if header.kind != "embedding":
        raise DimMismatch(f"{path}: expected embedding container, got {header.kind}")
    return list(records)


def _load_features(path, keep: set[SampleId] | None = None):
    header, records = feature_store.read_features(path)
    if header.kind != "gradient":
        raise DimMismatch(f"{path}: expected gradient container, got {header.kind}")
    if keep is None:
        return header, list(records)
    return header, [r for r in records if r.id in keep]


def run_pipeline(
    cfg: PipelineConfig,
    domain_emb_path,
    cand_emb_path,
    domain_feat_path,
    cand_feat_path,
    out_dir=None,
) -> PipelineOutput:
    """Pre-select by embedding KNN, score pre-selected candidates by kernel
    utility, and keep the Top-N.

    M and K are clamped to the candidate count so small pools degenerate to
    ranking every candidate; N is clamped to the pool size. Gradient features
    are streamed and only domain plus pre-selected candidate vectors are held
    in memory. Fully deterministic given the same files and config.
    """
    timings: dict[str, float] = {"warm_up": 0.0, "gradient": 0.0}
    cfg = validate_config(cfg)

    (d_emb, c_emb), timings["embedding"] = _stage(
        "embedding",
        lambda: (_load_embeddings(domain_emb_path), _load_embeddings(cand_emb_path)),
    )

    k_eff = min(cfg.knn_k, len(c_emb))
    m_eff = min(cfg.preselect_size, len(c_emb))

    def _knn():
        table = preselect.accelerated_knn_relevance(d_emb, c_emb, k_eff)
        return table, preselect.top_m(table, m_eff)

    (relevance, pre_ids), timings["knn"] = _stage("knn", _knn)

    def _features():
        dh, d_feats = _load_features(domain_feat_path)
        ch, c_feats = _load_features(cand_feat_path, keep=set(pre_ids))
        missing = set(pre_ids) - {r.id for r in c_feats}
        if missing:
            sample = sorted(missing)[0]
            raise DimMismatch(
                f"{len(missing)} pre-selected candidates have no gradient features "
                f"in {cand_feat_path} (e.g. {sample})"
            )
        if dh.proj_seed != ch.proj_seed:
            raise SeedMismatch(
                f"domain features seed {dh.proj_seed} != candidate seed {ch.proj_seed}"
            )
        if dh.dim != cfg.proj_dim or ch.dim != cfg.proj_dim:
            raise DimMismatch(
                f"feature dim {dh.dim}/{ch.dim} does not match config proj_dim {cfg.proj_dim}"
            )
        return dh, d_feats, ch, c_feats

    (dh, d_feats, ch, c_feats), timings["gradient"] = _stage("gradient", _features)

    def _score():
        km = assemble_kernel_matrix(
            d_feats, c_feats, domain_seed=dh.proj_seed, cand_seed=ch.proj_seed
        )
        scores = utility_scores(km)
        return km, scores, select_top_n(scores, min(cfg.n_select, len(scores.cand_ids)))

    (km, scores, result), timings["ntk_selection"] = _stage("ntk_selection", _score)

    def _rel(p) -> str:
        # digest paths relative to the output dir keep reruns byte-identical
        if out_dir is None:
            return str(p)
        try:
            return os.path.relpath(p, out_dir)
        except ValueError:
            return str(p)

    manifest = RunManifest(
        config=cfg,
        domain_count=len(d_emb),
        candidate_count=len(c_emb),
        feature_file_digests=[
            (_rel(p), sha256_file(p))
            for p in (domain_emb_path, cand_emb_path, domain_feat_path, cand_feat_path)
        ],
    )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.manifest_ref = manifest.write(out / "manifest.json")
        (out / "selection.jsonl").write_text(result.to_jsonl())
        (out / "relevance.json").write_text(relevance.to_json())

    return PipelineOutput(result, manifest, relevance, pre_ids, scores, timings)
