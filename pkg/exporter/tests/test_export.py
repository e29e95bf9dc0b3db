"""End-to-end export checks, with the engine as the validation oracle."""
import json

import numpy as np
import pytest
import torch

from ntksel_exporter.adapters import attach_adapters
from ntksel_exporter.export import (
    ExportJob,
    TokenizationError,
    export_embeddings,
    export_gradients,
    load_model,
    warmup_adapters,
)

ntksel_fs = pytest.importorskip("ntksel.feature_store")
from ntksel.projection import ProjectionSpec, project  # noqa: E402

from conftest import write_jsonl  # noqa: E402


def job_for(tiny_model_dir, data, out, **kw):
    defaults = dict(proj_seed=0, proj_dim=64, rank=4, batch_size=2)
    defaults.update(kw)
    return ExportJob(
        model_path=tiny_model_dir, dataset_path=str(data), out_path=str(out), **defaults
    )


class TestEmbeddings:
    def test_file_passes_engine_validation(self, tiny_model_dir, small_dataset, tmp_path):
        job = job_for(tiny_model_dir, small_dataset, tmp_path / "emb.bin")
        export_embeddings(job)
        header, records = ntksel_fs.read_all(tmp_path / "emb.bin")
        assert header.kind == "embedding"
        assert header.dim == 64
        assert len(records) == 4
        assert all(np.isfinite(r.vector).all() for r in records)

    def test_duplicate_samples_identical_vectors(self, tiny_model_dir, tmp_path):
        rows = [
            {"id": "cand:0", "prompt": "same prompt", "response": "same answer"},
            {"id": "cand:1", "prompt": "same prompt", "response": "same answer"},
        ]
        data = write_jsonl(tmp_path / "dup.jsonl", rows)
        job = job_for(tiny_model_dir, data, tmp_path / "emb.bin", batch_size=1)
        export_embeddings(job)
        _, records = ntksel_fs.read_all(tmp_path / "emb.bin")
        assert np.array_equal(records[0].vector, records[1].vector)

    def test_empty_dataset_header_only(self, tiny_model_dir, tmp_path):
        data = write_jsonl(tmp_path / "empty.jsonl", [])
        job = job_for(tiny_model_dir, data, tmp_path / "emb.bin")
        export_embeddings(job)
        header, records = ntksel_fs.read_all(tmp_path / "emb.bin")
        assert header.count == 0 and records == []

    def test_batching_does_not_change_vectors(self, tiny_model_dir, small_dataset, tmp_path):
        job1 = job_for(tiny_model_dir, small_dataset, tmp_path / "b1.bin", batch_size=1)
        job4 = job_for(tiny_model_dir, small_dataset, tmp_path / "b4.bin", batch_size=4)
        export_embeddings(job1)
        export_embeddings(job4)
        _, r1 = ntksel_fs.read_all(tmp_path / "b1.bin")
        _, r4 = ntksel_fs.read_all(tmp_path / "b4.bin")
        for a, b in zip(r1, r4):
            np.testing.assert_allclose(a.vector, b.vector, atol=2e-6)

    def test_overlong_sample_rejected(self, tiny_model_dir, tmp_path):
        rows = [{"id": "cand:0", "prompt": "x" * 300, "response": "y"}]
        data = write_jsonl(tmp_path / "long.jsonl", rows)
        job = job_for(tiny_model_dir, data, tmp_path / "emb.bin")
        with pytest.raises(TokenizationError):
            export_embeddings(job)


class TestGradients:
    def test_file_passes_engine_validation(self, tiny_model_dir, small_dataset, tmp_path):
        job = job_for(tiny_model_dir, small_dataset, tmp_path / "grad.bin")
        export_gradients(job)
        header, records = ntksel_fs.read_all(tmp_path / "grad.bin")
        assert header.kind == "gradient"
        assert header.dim == 64
        assert header.proj_seed == 0
        assert header.seq_len_normalized and header.grad_scaled
        assert header.source_param_dim > 0
        assert len(records) == 4
        # zero-initialized A still leaves the gradient generally nonzero
        assert all(np.any(r.vector != 0) for r in records)

    def test_seq_len_is_response_token_count(self, tiny_model_dir, tmp_path):
        rows = [{"id": "cand:0", "prompt": "ab", "response": "wxyz"}]
        data = write_jsonl(tmp_path / "one.jsonl", rows)
        job = job_for(tiny_model_dir, data, tmp_path / "grad.bin")
        export_gradients(job)
        _, records = ntksel_fs.read_all(tmp_path / "grad.bin")
        assert records[0].seq_len == 4  # byte tokenizer: one token per byte

    def test_deterministic_across_runs(self, tiny_model_dir, small_dataset, tmp_path):
        job1 = job_for(tiny_model_dir, small_dataset, tmp_path / "g1.bin")
        job2 = job_for(tiny_model_dir, small_dataset, tmp_path / "g2.bin")
        d1 = export_gradients(job1)
        d2 = export_gradients(job2)
        assert d1 == d2
        assert (tmp_path / "g1.bin").read_bytes() == (tmp_path / "g2.bin").read_bytes()

    def test_manifest_written(self, tiny_model_dir, small_dataset, tmp_path):
        job = job_for(tiny_model_dir, small_dataset, tmp_path / "grad.bin")
        export_gradients(job)
        manifest = json.loads((tmp_path / "grad.bin.manifest.json").read_text())
        assert manifest["gradient_target"] == "response_logit_sum"
        assert manifest["normalization"] == "response_token_count"
        assert manifest["adapter"]["rank"] == 4
        assert manifest["adapter"]["layout"][0]["offset"] == 0

    def test_projection_equivalence_bit_exact(self, tiny_model_dir):
        """A synthetic gradient injected at the hook point projects to the
        same float64 (hence float32) vector as the engine's projector."""
        from ntksel_exporter.export import _project_gradient

        model = load_model(tiny_model_dir)
        adapters = attach_adapters(model, rank=4)
        p_total = adapters.param_count
        rng = np.random.default_rng(42)
        flat = rng.normal(size=p_total)
        fake_grads = []
        pos = 0
        for _, m in adapters.modules:
            for t in (m.lora_a, m.lora_b):
                n = t.numel()
                fake_grads.append(
                    torch.tensor(flat[pos : pos + n].reshape(tuple(t.shape)))
                )
                pos += n
        job = ExportJob("", "", "", proj_seed=9, proj_dim=128)
        ours = _project_gradient(fake_grads, job, p_total)
        spec = ProjectionSpec(seed=9, source_dim=p_total, target_dim=128)
        theirs = project(spec, flat)
        assert np.array_equal(ours, theirs)
        assert np.array_equal(ours.astype(np.float32), theirs.astype(np.float32))


class TestWarmup:
    def test_zero_steps_checkpoint_equals_init(self, tiny_model_dir, small_dataset, tmp_path):
        job = job_for(tiny_model_dir, small_dataset, tmp_path / "out.bin")
        path, losses = warmup_adapters(job, steps=0)
        assert losses == []
        state = torch.load(path, weights_only=True)
        model = load_model(tiny_model_dir)
        ref = attach_adapters(model, rank=4)
        for key, tensor in ref.state_dict().items():
            assert torch.equal(state[key], tensor)

    def test_loss_decreases(self, tiny_model_dir, small_dataset, tmp_path):
        job = job_for(tiny_model_dir, small_dataset, tmp_path / "out.bin")
        _, losses = warmup_adapters(job, steps=8, lr=5e-3)
        assert losses[-1] < losses[0]

    def test_checkpoint_reload_reproduces_embeddings(self, tiny_model_dir, small_dataset, tmp_path):
        job = job_for(tiny_model_dir, small_dataset, tmp_path / "warm.bin")
        ckpt, _ = warmup_adapters(job, steps=3, lr=5e-3)
        job1 = job_for(
            tiny_model_dir, small_dataset, tmp_path / "e1.bin", adapter_checkpoint=ckpt
        )
        job2 = job_for(
            tiny_model_dir, small_dataset, tmp_path / "e2.bin", adapter_checkpoint=ckpt
        )
        export_embeddings(job1)
        export_embeddings(job2)
        assert (tmp_path / "e1.bin").read_bytes() == (tmp_path / "e2.bin").read_bytes()


class TestEngineIntegration:
    def test_pipeline_consumes_exported_files(self, tiny_model_dir, tmp_path):
        """Full interop: engine selection runs directly on exporter output."""
        from ntksel.domain import PipelineConfig
        from ntksel.select import run_pipeline

        domain_rows = [
            {"id": f"d:{i}", "prompt": f"domain q{i}", "response": f"domain a{i}"}
            for i in range(3)
        ]
        cand_rows = [
            {"id": f"c:{i}", "prompt": f"cand q{i}", "response": f"cand a{i}"}
            for i in range(8)
        ]
        d_data = write_jsonl(tmp_path / "d.jsonl", domain_rows)
        c_data = write_jsonl(tmp_path / "c.jsonl", cand_rows)
        for name, data in (("domain", d_data), ("cand", c_data)):
            export_embeddings(job_for(tiny_model_dir, data, tmp_path / f"{name}_emb.bin"))
            export_gradients(job_for(tiny_model_dir, data, tmp_path / f"{name}_feat.bin"))
        cfg = PipelineConfig(
            n_select=3, preselect_size=8, knn_k=2, proj_dim=64, proj_seed=0
        )
        out = run_pipeline(
            cfg, tmp_path / "domain_emb.bin", tmp_path / "cand_emb.bin",
            tmp_path / "domain_feat.bin", tmp_path / "cand_feat.bin",
            out_dir=tmp_path / "run",
        )
        assert len(out.result.selected) == 3
        assert (tmp_path / "run" / "selection.jsonl").exists()
