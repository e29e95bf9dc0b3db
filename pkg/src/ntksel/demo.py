"""Self-contained synthetic demonstration of the full selection pipeline.

Builds a toy network, draws a small "domain" task from one input generator
and a candidate pool mixing that generator with an off-domain one, exports
embeddings and projected gradient features through the real binary files,
runs the two-stage pipeline, and checks that generator-matched candidates
are selected far above their base rate (one-sided binomial test).
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binom

from . import feature_store, select, toy_model
from .domain import PipelineConfig, SampleId
from .errors import DemoAssertionFailed
from .feature_store import FeatureFileHeader
from .projection import ProjectionSpec
from .toy_model import ToyDataset, ToyNetwork

__all__ = ["DemoConfig", "DemoReport", "run_demo"]


@dataclass
class DemoConfig:
    seed: int = 0
    n_domain: int = 24
    n_candidates: int = 300
    n_select: int = 50
    matched_fraction: float = 0.5
    proj_dim: int = 512
    warmup_steps: int = 25
    warmup_lr: float = 0.05
    input_separation: float = 3.0
    input_noise: float = 0.4
    confidence: float = 0.99


@dataclass
class DemoReport:
    seed: int
    n_selected: int
    matched_selected: int
    base_rate: float
    selected_rate: float
    p_value: float
    passed: bool
    skipped: bool
    timings: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        # timings are excluded: the report file is byte-stable across reruns
        d = {k: v for k, v in self.__dict__.items() if k != "timings"}
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


def _write_embeddings(path, net, X, ids):
    records = toy_model.embedding_records(net, X, ids)
    header = FeatureFileHeader(
        kind="embedding", dim=records[0].vector.shape[0], count=len(records)
    )
    return feature_store.write_features(path, header, records)


def _write_gradients(path, net, X, ids, proj, grad_scale=1e-5):
    records = toy_model.gradient_feature_records(net, X, ids, proj, grad_scale)
    header = toy_model.feature_header(net, proj, len(records))
    return feature_store.write_features(path, header, records)


def run_demo(cfg: DemoConfig, out_dir) -> DemoReport:
    """Run the synthetic end-to-end demo; see module docstring.

    Writes embeddings, features, pipeline outputs, and the report under
    ``out_dir``. Raises DemoAssertionFailed when the matched-candidate
    enrichment is not significant at the configured confidence (unless the
    whole pool was selected, in which case the check is vacuous and skipped).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    timings: dict[str, float] = {}

    net = ToyNetwork.random(seed=cfg.seed)
    d = net.input_dim

    # two unit directions with a fixed separation: the domain generator and
    # an off-domain generator the selector should learn to avoid
    u_a = rng.normal(size=d)
    u_a /= np.linalg.norm(u_a)
    u_b = rng.normal(size=d)
    u_b -= u_a * (u_a @ u_b)
    u_b /= np.linalg.norm(u_b)
    mu_a = 0.5 * cfg.input_separation * u_a
    mu_b = -0.5 * cfg.input_separation * u_b

    def draw(mu, n):
        return mu[None, :] + cfg.input_noise * rng.normal(size=(n, d))

    domain_x = draw(mu_a, cfg.n_domain)
    teacher = rng.normal(size=(d, net.output_dim)) / np.sqrt(d)
    domain_task = ToyDataset(domain_x, domain_x @ teacher)

    n_matched = int(round(cfg.matched_fraction * cfg.n_candidates))
    cand_x = np.concatenate(
        [draw(mu_a, n_matched), draw(mu_b, cfg.n_candidates - n_matched)]
    )
    is_matched = np.zeros(cfg.n_candidates, dtype=bool)
    is_matched[:n_matched] = True
    perm = rng.permutation(cfg.n_candidates)
    cand_x, is_matched = cand_x[perm], is_matched[perm]

    # warm-up adapter phase on the domain task before computing embeddings
    t0 = time.perf_counter()
    toy_model.train_adapters(net, domain_task, cfg.warmup_steps, cfg.warmup_lr)
    timings["warm_up"] = time.perf_counter() - t0

    domain_ids = [SampleId("domain", i) for i in range(cfg.n_domain)]
    cand_ids = [SampleId("cand", i) for i in range(cfg.n_candidates)]
    matched_ids = {cid for cid, m in zip(cand_ids, is_matched) if m}

    t0 = time.perf_counter()
    _write_embeddings(out / "domain_emb.bin", net, domain_x, domain_ids)
    _write_embeddings(out / "cand_emb.bin", net, cand_x, cand_ids)
    timings["embedding"] = time.perf_counter() - t0

    proj = ProjectionSpec(
        seed=cfg.seed, source_dim=net.adapter_param_count, target_dim=cfg.proj_dim
    )
    t0 = time.perf_counter()
    _write_gradients(out / "domain_feat.bin", net, domain_x, domain_ids, proj)
    _write_gradients(out / "cand_feat.bin", net, cand_x, cand_ids, proj)
    timings["gradient"] = time.perf_counter() - t0

    n_sel = min(cfg.n_select, cfg.n_candidates)
    m = min(4 * n_sel, cfg.n_candidates)
    pipe_cfg = PipelineConfig(
        n_select=n_sel,
        preselect_size=m,
        knn_k=max(1, m // 4),
        proj_dim=cfg.proj_dim,
        proj_seed=cfg.seed,
    )
    pipe = select.run_pipeline(
        pipe_cfg,
        out / "domain_emb.bin",
        out / "cand_emb.bin",
        out / "domain_feat.bin",
        out / "cand_feat.bin",
        out_dir=out,
    )
    timings["knn"] = pipe.timings["knn"]
    timings["ntk_selection"] = pipe.timings["ntk_selection"]

    matched_selected = sum(1 for sid in pipe.result.selected if sid in matched_ids)
    base_rate = n_matched / cfg.n_candidates
    skipped = n_sel >= cfg.n_candidates
    if skipped:
        p_value, passed = 1.0, True
    else:
        # one-sided binomial: could chance selection at the base rate produce
        # this many matched candidates?
        p_value = float(binom.sf(matched_selected - 1, n_sel, base_rate))
        passed = p_value < (1.0 - cfg.confidence)

    report = DemoReport(
        seed=cfg.seed,
        n_selected=n_sel,
        matched_selected=matched_selected,
        base_rate=base_rate,
        selected_rate=matched_selected / n_sel,
        p_value=p_value,
        passed=passed,
        skipped=skipped,
        timings=timings,
    )
    (out / "demo_report.json").write_text(report.to_json())
    if not passed and not skipped:
        raise DemoAssertionFailed(
            f"matched selection rate {report.selected_rate:.3f} not above base "
            f"rate {base_rate:.3f} at {cfg.confidence:.0%} confidence "
            f"(p={p_value:.4g})"
        )
    return report
