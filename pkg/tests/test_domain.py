import json

import pytest

from ntksel.domain import PipelineConfig, RunManifest, SampleId, validate_config
from ntksel.errors import ConfigError


class TestSampleId:
    def test_ordering_is_lexicographic(self):
        assert SampleId("a", 5) < SampleId("b", 0)
        assert SampleId("a", 1) < SampleId("a", 2)

    def test_str_parse_roundtrip(self):
        sid = SampleId("cand", 17)
        assert SampleId.parse(str(sid)) == sid

    def test_parse_tag_with_colon(self):
        assert SampleId.parse("a:b:3") == SampleId("a:b", 3)

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            SampleId("a", -1)


class TestValidateConfig:
    def test_reference_operating_point_valid(self):
        cfg = PipelineConfig(n_select=9000, preselect_size=36000, knn_k=9000, proj_dim=8192)
        assert validate_config(cfg) is cfg

    def test_preselect_smaller_than_n_rejected(self):
        with pytest.raises(ConfigError, match="preselect_size"):
            validate_config(PipelineConfig(n_select=10, preselect_size=5, knn_k=1))

    def test_minimal_config_valid(self):
        cfg = PipelineConfig(n_select=1, preselect_size=1, knn_k=1, proj_dim=1)
        assert validate_config(cfg) is cfg

    def test_k_larger_than_m_rejected(self):
        with pytest.raises(ConfigError, match="knn_k"):
            validate_config(PipelineConfig(n_select=1, preselect_size=2, knn_k=3))

    def test_idempotent(self):
        cfg = PipelineConfig()
        assert validate_config(validate_config(cfg)) == cfg

    def test_defaults_match_reference_settings(self):
        cfg = PipelineConfig()
        assert cfg.n_select == 9000
        assert cfg.preselect_size == 4 * cfg.n_select
        assert cfg.knn_k == cfg.preselect_size // 4
        assert cfg.proj_dim == 8192
        assert cfg.grad_scale == 1e-5
        assert cfg.normalize_by_seq_len is True


class TestRunManifest:
    def test_json_roundtrip(self, tmp_path):
        m = RunManifest(PipelineConfig(), 10, 100, [("a.bin", "ab" * 32)])
        back = RunManifest.from_json(m.to_json())
        assert back == m

    def test_write_returns_content_hash(self, tmp_path):
        m = RunManifest(PipelineConfig(), 1, 2)
        path = tmp_path / "manifest.json"
        digest = m.write(path)
        import hashlib

        assert digest == hashlib.sha256(path.read_bytes()).hexdigest()

    def test_digest_verification(self, tmp_path):
        f = tmp_path / "feat.bin"
        f.write_bytes(b"hello")
        from ntksel.domain import sha256_file

        m = RunManifest(PipelineConfig(), 1, 2, [(str(f), sha256_file(f))])
        m.verify_digests()
        f.write_bytes(b"tampered")
        with pytest.raises(ConfigError, match="digest mismatch"):
            m.verify_digests()

    def test_created_at_deterministic_by_default(self, monkeypatch):
        monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
        a = RunManifest(PipelineConfig(), 1, 1)
        b = RunManifest(PipelineConfig(), 1, 1)
        assert a.created_at == b.created_at

    def test_created_at_honors_source_date_epoch(self, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
        m = RunManifest(PipelineConfig(), 1, 1)
        assert m.created_at == "2023-11-14T22:13:20Z"
