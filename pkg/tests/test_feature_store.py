import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntksel.domain import SampleId
from ntksel.errors import (
    BadMagic,
    CountMismatch,
    DimMismatch,
    DuplicateId,
    IoError,
    NonFiniteValue,
    StoreError,
    TruncatedFile,
)
from ntksel.feature_store import (
    EmbeddingRecord,
    FeatureFileHeader,
    FeatureRecord,
    decode_id_list,
    encode_id_list,
    read_all,
    read_features,
    write_features,
)


def grad_header(dim, count, seed=7, source=100):
    return FeatureFileHeader(
        kind="gradient", dim=dim, count=count, proj_seed=seed, source_param_dim=source,
        seq_len_normalized=True, grad_scaled=True,
    )


def make_records(n, dim, tag="s", rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    return [
        FeatureRecord(SampleId(tag, i), 1 + i, rng.normal(size=dim).astype(np.float32))
        for i in range(n)
    ]


class TestRoundTrip:
    def test_three_gradient_records(self, tmp_path):
        records = make_records(3, 4)
        path = tmp_path / "f.bin"
        write_features(path, grad_header(4, 3), records)
        header, back = read_all(path)
        assert header.kind == "gradient"
        assert header.proj_seed == 7
        assert back == records

    def test_nan_entry_rejected(self, tmp_path):
        rec = FeatureRecord(SampleId("s", 0), 1, np.array([1.0, np.nan], dtype=np.float32))
        with pytest.raises(NonFiniteValue):
            write_features(tmp_path / "f.bin", grad_header(2, 1), [rec])
        assert not (tmp_path / "f.bin").exists()

    def test_empty_stream_header_only(self, tmp_path):
        path = tmp_path / "empty.bin"
        write_features(path, grad_header(8, 0), [])
        header, back = read_all(path)
        assert header.count == 0
        assert back == []

    def test_embedding_records(self, tmp_path):
        recs = [EmbeddingRecord(SampleId("e", i), np.arange(3, dtype=np.float32) + i) for i in range(4)]
        header = FeatureFileHeader(kind="embedding", dim=3, count=4)
        path = tmp_path / "emb.bin"
        write_features(path, header, recs)
        _, back = read_all(path)
        assert back == recs

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(0, 8),
        dim=st.integers(1, 16),
        seed=st.integers(0, 2**32),
    )
    def test_roundtrip_property(self, tmp_path_factory, n, dim, seed):
        records = make_records(n, dim, rng_seed=seed)
        path = tmp_path_factory.mktemp("rt") / "f.bin"
        write_features(path, grad_header(dim, n), records)
        _, back = read_all(path)
        assert back == records


class TestValidation:
    def test_duplicate_id(self, tmp_path):
        recs = make_records(2, 4)
        recs[1].id = recs[0].id
        with pytest.raises(DuplicateId):
            write_features(tmp_path / "f.bin", grad_header(4, 2), recs)

    def test_dim_mismatch(self, tmp_path):
        with pytest.raises(DimMismatch):
            write_features(tmp_path / "f.bin", grad_header(5, 1), make_records(1, 4))

    def test_count_mismatch(self, tmp_path):
        with pytest.raises(CountMismatch):
            write_features(tmp_path / "f.bin", grad_header(4, 9), make_records(2, 4))

    def test_zero_seq_len_rejected(self):
        with pytest.raises(StoreError):
            FeatureRecord(SampleId("s", 0), 0, np.ones(2, dtype=np.float32))


class TestCorruption:
    def _write(self, tmp_path):
        path = tmp_path / "f.bin"
        write_features(path, grad_header(4, 3), make_records(3, 4))
        return path

    def test_bad_magic(self, tmp_path):
        path = self._write(tmp_path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagic):
            read_features(path)

    def test_truncated_mid_record(self, tmp_path):
        path = self._write(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        _, records = read_features(path)
        with pytest.raises(TruncatedFile):
            list(records)

    def test_trailing_bytes(self, tmp_path):
        path = self._write(tmp_path)
        with open(path, "ab") as f:
            f.write(b"junk")
        _, records = read_features(path)
        with pytest.raises(StoreError):
            list(records)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            read_features(tmp_path / "nope.bin")


class TestHashStability:
    def test_identical_content_identical_bytes(self, tmp_path):
        h1 = write_features(tmp_path / "a.bin", grad_header(4, 3), make_records(3, 4))
        h2 = write_features(tmp_path / "b.bin", grad_header(4, 3), make_records(3, 4))
        assert h1 == h2
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_hash_matches_file_bytes(self, tmp_path):
        import hashlib

        path = tmp_path / "a.bin"
        digest = write_features(path, grad_header(4, 3), make_records(3, 4))
        assert digest == hashlib.sha256(path.read_bytes()).hexdigest()


def test_id_list_roundtrip():
    ids = [SampleId("a", 3), SampleId("tag:with:colons", 2**40), SampleId("b", 0)]
    assert decode_id_list(encode_id_list(ids)) == ids


def test_streaming_reader_is_lazy(tmp_path):
    path = tmp_path / "f.bin"
    write_features(path, grad_header(4, 3), make_records(3, 4))
    _, records = read_features(path)
    first = next(records)
    assert first.id == SampleId("s", 0)
