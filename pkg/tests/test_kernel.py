import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ntksel.domain import SampleId
from ntksel.errors import (
    DegenerateVariance,
    DimMismatch,
    EmptyMatrix,
    SeedMismatch,
    ZeroNorm,
)
from ntksel.feature_store import FeatureRecord
from ntksel.kernel import (
    KernelMatrix,
    assemble_kernel_matrix,
    cross_term_diagnostic,
    exact_ntk,
    frobenius_cos,
    jf_ntk,
    read_kernel,
    write_kernel,
)
from ntksel.toy_model import ToyNetwork, jacobian


finite_vec = arrays(
    np.float64,
    st.integers(1, 8),
    elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False),
)


class TestJfNtk:
    def test_orthogonal(self):
        assert jf_ntk(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_self_inner_product(self):
        assert jf_ntk(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 5.0

    def test_psd_diagonal(self):
        assert jf_ntk(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 25.0

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            jf_ntk(np.zeros(3), np.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(u=finite_vec)
    def test_symmetry_and_psd(self, u):
        v = u[::-1].copy()
        u2 = u[: v.shape[0]]
        assert jf_ntk(u2, v) == jf_ntk(v, u2)
        assert jf_ntk(u, u) >= 0.0


class TestExactNtk:
    def test_self_kernel_nonnegative(self, default_net, rng):
        x = rng.normal(size=default_net.input_dim)
        assert exact_ntk(default_net, x, x) >= 0.0

    def test_single_output_equals_jf(self, rng):
        from ntksel.toy_model import summed_output_gradient

        net = ToyNetwork.random(layer_dims=(4, 8, 1), seed=2)
        x, y = rng.normal(size=4), rng.normal(size=4)
        jf = jf_ntk(
            summed_output_gradient(net, x).flat, summed_output_gradient(net, y).flat
        )
        assert exact_ntk(net, x, y) == jf

    def test_matches_jacobian_contraction_oracle(self, rng):
        net = ToyNetwork.random(layer_dims=(4, 10, 3), seed=3)
        x, y = rng.normal(size=4), rng.normal(size=4)
        oracle = float(np.sum(jacobian(net, x) * jacobian(net, y)))
        got = exact_ntk(net, x, y)
        assert abs(got - oracle) <= 1e-12 * max(1.0, abs(oracle))


class TestCrossTerm:
    def test_single_output_zero_ratio_unit_pearson(self, rng):
        net = ToyNetwork.random(layer_dims=(4, 12, 1), seed=4)
        pairs = [(rng.normal(size=4), rng.normal(size=4)) for _ in range(12)]
        s = cross_term_diagnostic(net, pairs)
        assert s.max_ratio == 0.0
        assert s.pearson_r == pytest.approx(1.0)

    def test_duplicated_pair_degenerate(self, rng):
        net = ToyNetwork.random(layer_dims=(4, 8, 2), seed=5)
        x, y = rng.normal(size=4), rng.normal(size=4)
        with pytest.raises(DegenerateVariance):
            cross_term_diagnostic(net, [(x, y), (x, y)])

    def test_needs_two_pairs(self, rng):
        net = ToyNetwork.random(layer_dims=(4, 8, 2), seed=5)
        with pytest.raises(ValueError):
            cross_term_diagnostic(net, [(rng.normal(size=4), rng.normal(size=4))])


class TestFrobeniusCos:
    def test_self_similarity_exactly_one(self, rng):
        a = rng.normal(size=(5, 5))
        assert frobenius_cos(a, a) == 1.0
        assert frobenius_cos(a, a.copy()) == 1.0

    def test_scale_invariance(self, rng):
        a = rng.normal(size=(4, 4))
        assert frobenius_cos(a, 2 * a) == pytest.approx(1.0, abs=1e-14)

    def test_orthogonal_matrices(self):
        assert frobenius_cos(np.diag([1.0, 0.0]), np.diag([0.0, 1.0])) == 0.0

    def test_zero_norm(self):
        with pytest.raises(ZeroNorm):
            frobenius_cos(np.zeros((2, 2)), np.eye(2))

    def test_shape_mismatch(self):
        with pytest.raises(DimMismatch):
            frobenius_cos(np.eye(2), np.eye(3))

    def test_range_clipped(self, rng):
        a = rng.normal(size=(3, 3))
        assert -1.0 <= frobenius_cos(a, -a) <= 1.0
        assert frobenius_cos(a, -a) == pytest.approx(-1.0, abs=1e-14)


def feature(tag, i, vec):
    return FeatureRecord(SampleId(tag, i), 1, np.asarray(vec, dtype=np.float32))


class TestAssembly:
    def test_one_by_one_identical_vectors(self):
        v = [3.0, 4.0]
        km = assemble_kernel_matrix([feature("d", 0, v)], [feature("c", 0, v)])
        np.testing.assert_allclose(km.values, [[25.0]])

    def test_zero_candidates_zero_matrix(self, rng):
        dom = [feature("d", i, rng.normal(size=4)) for i in range(3)]
        cand = [feature("c", i, np.zeros(4)) for i in range(5)]
        km = assemble_kernel_matrix(dom, cand)
        assert np.all(km.values == 0.0)

    def test_matches_double_loop_oracle(self, rng):
        dom = [feature("d", i, rng.normal(size=6)) for i in range(3)]
        cand = [feature("c", j, rng.normal(size=6)) for j in range(4)]
        km = assemble_kernel_matrix(dom, cand)
        for i, r in enumerate(sorted(dom, key=lambda f: f.id)):
            for j, c in enumerate(sorted(cand, key=lambda f: f.id)):
                oracle = jf_ntk(r.vector, c.vector)
                assert abs(km.values[i, j] - oracle) <= 1e-12 * max(1.0, abs(oracle))

    def test_row_and_col_order_by_id(self, rng):
        dom = [feature("d", i, rng.normal(size=4)) for i in (2, 0, 1)]
        cand = [feature("c", j, rng.normal(size=4)) for j in (1, 0)]
        km = assemble_kernel_matrix(dom, cand)
        assert [s.index for s in km.row_ids] == [0, 1, 2]
        assert [s.index for s in km.col_ids] == [0, 1]

    def test_seed_mismatch(self, rng):
        dom = [feature("d", 0, rng.normal(size=4))]
        cand = [feature("c", 0, rng.normal(size=4))]
        with pytest.raises(SeedMismatch):
            assemble_kernel_matrix(dom, cand, domain_seed=1, cand_seed=2)

    def test_dim_mismatch(self, rng):
        with pytest.raises(DimMismatch):
            assemble_kernel_matrix(
                [feature("d", 0, rng.normal(size=4))],
                [feature("c", 0, rng.normal(size=5))],
            )

    def test_empty_inputs(self):
        with pytest.raises(EmptyMatrix):
            assemble_kernel_matrix([], [])

    def test_tile_schedule_independence_bitwise(self, rng):
        # tiles written in shuffled (simulated-parallel) order must reproduce
        # the sequential assembly bit for bit
        from ntksel.kernel import tiled_products

        d_mat = rng.normal(size=(13, 32))
        c_mat = rng.normal(size=(11, 32))
        sequential = tiled_products(d_mat, c_mat, tile=4)
        tiles = [
            (i0, j0)
            for i0 in range(0, 13, 4)
            for j0 in range(0, 11, 4)
        ]
        rng.shuffle(tiles)
        shuffled = np.empty_like(sequential)
        for i0, j0 in tiles:
            i1, j1 = min(i0 + 4, 13), min(j0 + 4, 11)
            shuffled[i0:i1, j0:j1] = np.ascontiguousarray(d_mat[i0:i1]) @ (
                np.ascontiguousarray(c_mat[j0:j1]).T
            )
        assert np.array_equal(sequential, shuffled)

    def test_assembly_deterministic(self, rng):
        dom = [feature("d", i, rng.normal(size=32)) for i in range(10)]
        cand = [feature("c", j, rng.normal(size=32)) for j in range(7)]
        a = assemble_kernel_matrix(dom, cand)
        b = assemble_kernel_matrix(list(reversed(dom)), list(reversed(cand)))
        assert np.array_equal(a.values, b.values)

    def test_gram_eigenvalues_above_negative_tolerance(self, rng):
        feats = [feature("g", i, rng.normal(size=12)) for i in range(20)]
        km = assemble_kernel_matrix(feats, feats)
        eigs = np.linalg.eigvalsh((km.values + km.values.T) / 2)
        assert eigs.min() >= -1e-8 * km.values.max()


class TestKernelContainer:
    def test_roundtrip(self, tmp_path, rng):
        dom = [feature("d", i, rng.normal(size=4)) for i in range(3)]
        cand = [feature("c", j, rng.normal(size=4)) for j in range(5)]
        km = assemble_kernel_matrix(dom, cand)
        path = tmp_path / "kernel.bin"
        write_kernel(path, km)
        back = read_kernel(path)
        assert back.row_ids == km.row_ids
        assert back.col_ids == km.col_ids
        np.testing.assert_allclose(back.values, km.values, rtol=1e-6, atol=1e-9)
