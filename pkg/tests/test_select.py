import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntksel import feature_store, toy_model
from ntksel.domain import PipelineConfig, SampleId
from ntksel.errors import EmptyMatrix, NTooLarge, StageError
from ntksel.feature_store import FeatureFileHeader, FeatureRecord
from ntksel.kernel import KernelMatrix, assemble_kernel_matrix
from ntksel.projection import ProjectionSpec
from ntksel.select import (
    SelectionResult,
    UtilityScores,
    run_pipeline,
    select_top_n,
    utility_scores,
)
from ntksel.toy_model import ToyNetwork


def km(values, tags=("d", "c")):
    values = np.asarray(values, dtype=np.float64)
    rows = [SampleId(tags[0], i) for i in range(values.shape[0])]
    cols = [SampleId(tags[1], j) for j in range(values.shape[1])]
    return KernelMatrix(rows, cols, values)


class TestUtilityScores:
    def test_column_means(self):
        s = utility_scores(km([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(s.scores, [2.0, 3.0])

    def test_single_domain_row(self):
        s = utility_scores(km([[5.0, -1.0, 0.5]]))
        np.testing.assert_array_equal(s.scores, [5.0, -1.0, 0.5])

    def test_matches_double_loop_oracle(self, rng):
        values = rng.normal(size=(5, 7))
        s = utility_scores(km(values))
        for j in range(7):
            oracle = sum(values[i, j] for i in range(5)) / 5
            assert abs(s.scores[j] - oracle) <= 1e-12 * max(1.0, abs(oracle))

    def test_empty(self):
        with pytest.raises(EmptyMatrix):
            utility_scores(km(np.zeros((0, 3))))


class TestSelectTopN:
    def scores(self, vals):
        return UtilityScores([SampleId("c", i) for i in range(len(vals))], np.asarray(vals, float))

    def test_picks_largest(self):
        r = select_top_n(self.scores([2.0, 3.0]), 1)
        assert r.selected == [SampleId("c", 1)]

    def test_equal_scores_take_smallest_ids(self):
        r = select_top_n(self.scores([1.0, 1.0, 1.0]), 2)
        assert r.selected == [SampleId("c", 0), SampleId("c", 1)]

    def test_n_too_large(self):
        with pytest.raises(NTooLarge):
            select_top_n(self.scores([1.0]), 2)

    def test_scores_non_increasing(self, rng):
        r = select_top_n(self.scores(rng.normal(size=20)), 10)
        assert all(a >= b for a, b in zip(r.scores, r.scores[1:]))

    def test_positive_scaling_invariance(self, rng):
        vals = rng.normal(size=15)
        base = select_top_n(self.scores(vals), 6)
        scaled = select_top_n(self.scores(vals * 3.7), 6)
        assert base.selected == scaled.selected

    @settings(max_examples=40, deadline=None)
    @given(
        vals=st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=20),
        n=st.integers(0, 19),
    )
    def test_subset_consistency(self, vals, n):
        if n + 1 > len(vals):
            return
        s = self.scores(vals)
        small = select_top_n(s, n)
        big = select_top_n(s, n + 1)
        assert big.selected[:n] == small.selected

    def test_score_linearity_over_domain_union(self, rng):
        # utility of D1 union D2 is the size-weighted mean of per-set scores
        feats = rng.normal(size=(6, 4))
        cands = rng.normal(size=(5, 4))
        k1 = km(feats[:2] @ cands.T)
        k2 = km(feats[2:] @ cands.T)
        k_all = km(feats @ cands.T)
        s1 = utility_scores(k1).scores
        s2 = utility_scores(k2).scores
        s_all = utility_scores(k_all).scores
        np.testing.assert_allclose(s_all, (2 * s1 + 4 * s2) / 6, rtol=1e-12)

    def test_jsonl_roundtrip(self):
        r = SelectionResult([SampleId("c", 2), SampleId("c", 0)], [1.5, 0.5], "ab" * 32)
        back = SelectionResult.from_jsonl(r.to_jsonl())
        assert back == r


def write_pipeline_inputs(tmp_path, seed=0, n_domain=6, n_cand=30, proj_dim=32):
    """Build toy embedding + feature files for pipeline tests."""
    rng = np.random.default_rng(seed)
    net = ToyNetwork.random(layer_dims=(4, 16, 2), seed=seed)
    d_x = rng.normal(size=(n_domain, 4))
    c_x = rng.normal(size=(n_cand, 4))
    d_ids = [SampleId("d", i) for i in range(n_domain)]
    c_ids = [SampleId("c", i) for i in range(n_cand)]
    proj = ProjectionSpec(seed=seed, source_dim=net.adapter_param_count, target_dim=proj_dim)

    paths = {}
    for name, X, ids in (("domain", d_x, d_ids), ("cand", c_x, c_ids)):
        emb = toy_model.embedding_records(net, X, ids)
        emb_header = FeatureFileHeader(kind="embedding", dim=emb[0].vector.shape[0], count=len(emb))
        paths[f"{name}_emb"] = tmp_path / f"{name}_emb.bin"
        feature_store.write_features(paths[f"{name}_emb"], emb_header, emb)
        feats = toy_model.gradient_feature_records(net, X, ids, proj)
        paths[f"{name}_feat"] = tmp_path / f"{name}_feat.bin"
        feature_store.write_features(
            paths[f"{name}_feat"], toy_model.feature_header(net, proj, len(feats)), feats
        )
    return net, paths, (d_x, c_x)


class TestRunPipeline:
    def cfg(self, n, m, k, p=32, seed=0):
        return PipelineConfig(n_select=n, preselect_size=m, knn_k=k, proj_dim=p, proj_seed=seed)

    def test_end_to_end(self, tmp_path):
        _, paths, _ = write_pipeline_inputs(tmp_path)
        out = run_pipeline(
            self.cfg(5, 20, 5), paths["domain_emb"], paths["cand_emb"],
            paths["domain_feat"], paths["cand_feat"], out_dir=tmp_path / "out",
        )
        assert len(out.result.selected) == 5
        assert (tmp_path / "out" / "manifest.json").exists()
        assert (tmp_path / "out" / "selection.jsonl").exists()
        assert set(out.timings) >= {"embedding", "knn", "gradient", "ntk_selection"}

    def test_preselection_identity_when_m_covers_pool(self, tmp_path):
        # N=M=|C|: selection reduces to ranking every candidate
        _, paths, _ = write_pipeline_inputs(tmp_path, n_cand=12)
        out = run_pipeline(
            self.cfg(12, 12, 3), paths["domain_emb"], paths["cand_emb"],
            paths["domain_feat"], paths["cand_feat"],
        )
        assert len(out.result.selected) == 12
        assert sorted(out.result.selected) == [SampleId("c", i) for i in range(12)]

    def test_pool_equals_n_selects_everything(self, tmp_path):
        _, paths, _ = write_pipeline_inputs(tmp_path, n_cand=7)
        out = run_pipeline(
            self.cfg(7, 28, 7), paths["domain_emb"], paths["cand_emb"],
            paths["domain_feat"], paths["cand_feat"],
        )
        assert sorted(out.result.selected) == [SampleId("c", i) for i in range(7)]

    def test_deterministic_output_bytes(self, tmp_path):
        _, paths, _ = write_pipeline_inputs(tmp_path)
        for d in ("run1", "run2"):
            run_pipeline(
                self.cfg(5, 20, 5), paths["domain_emb"], paths["cand_emb"],
                paths["domain_feat"], paths["cand_feat"], out_dir=tmp_path / d,
            )
        for name in ("manifest.json", "selection.jsonl", "relevance.json"):
            assert (tmp_path / "run1" / name).read_bytes() == (
                tmp_path / "run2" / name
            ).read_bytes()

    def test_missing_file_tagged_with_stage(self, tmp_path):
        _, paths, _ = write_pipeline_inputs(tmp_path)
        with pytest.raises(StageError, match=r"\[embedding\]"):
            run_pipeline(
                self.cfg(5, 20, 5), tmp_path / "missing.bin", paths["cand_emb"],
                paths["domain_feat"], paths["cand_feat"],
            )

    def test_seed_mismatch_tagged(self, tmp_path):
        _, paths, _ = write_pipeline_inputs(tmp_path)
        other = tmp_path / "other"
        other.mkdir()
        net2, paths2, _ = write_pipeline_inputs(other, seed=1)
        with pytest.raises(StageError, match=r"\[gradient\]"):
            run_pipeline(
                self.cfg(5, 20, 5), paths["domain_emb"], paths["cand_emb"],
                paths["domain_feat"], paths2["cand_feat"],
            )

    def test_missing_features_for_preselected(self, tmp_path):
        _, paths, _ = write_pipeline_inputs(tmp_path)
        # truncate the candidate feature file to half the candidates
        header, records = feature_store.read_all(paths["cand_feat"])
        kept = records[:10]
        header.count = len(kept)
        feature_store.write_features(paths["cand_feat"], header, kept)
        with pytest.raises(StageError, match="no gradient features"):
            run_pipeline(
                self.cfg(5, 25, 5), paths["domain_emb"], paths["cand_emb"],
                paths["domain_feat"], paths["cand_feat"],
            )
