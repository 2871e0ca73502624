"""Karhunen-Loeve basis and modulus realisation."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drtopo import oracle
from drtopo.grid_fem import StructuredGrid
from drtopo.kl_field import (
    CovarianceSpec,
    KLBasis,
    ModulusTransform,
    build_kl_basis,
    gaussian_field,
    normal_cdf,
    realize_modulus,
)

GRID = StructuredGrid(8, 8, 1.0, 1.0)
SPEC = CovarianceSpec()


@pytest.fixture(scope="module")
def basis():
    return build_kl_basis(GRID, SPEC, 10)


class TestCovariance:
    def test_invalid(self):
        with pytest.raises(ValueError):
            CovarianceSpec(0.0, 1.0)
        with pytest.raises(ValueError):
            CovarianceSpec(1.0, -1.0)

    def test_diagonal_is_amplitude(self):
        x = GRID.element_centroids()
        assert np.diag(SPEC.matrix(x)) == pytest.approx(np.full(len(x), 100.0))


class TestBasis:
    def test_sorted_positive_orthonormal(self, basis):
        assert np.all(np.diff(basis.eigenvalues) <= 0)
        assert np.all(basis.eigenvalues > 0)
        assert np.max(np.abs(basis.gram() - np.eye(basis.k))) <= 1e-8

    def test_rank_one_limit(self):
        b = build_kl_basis(GRID, CovarianceSpec(100.0, 1e6), 4)
        assert b.eigenvalues[0] == pytest.approx(100.0, rel=1e-4)
        assert np.all(b.eigenvalues[1:] < 1e-3 * b.eigenvalues[0])

    def test_trace_bound(self):
        b = build_kl_basis(GRID, SPEC, GRID.n_elements)
        area = GRID.lx * GRID.ly
        assert b.eigenvalues.sum() <= 100.0 * area * (1 + 1e-10)
        assert b.eigenvalues.sum() == pytest.approx(100.0 * area, rel=1e-10)

    def test_jacobi_oracle(self, basis):
        x = GRID.element_centroids()
        w = np.full(GRID.n_elements, GRID.element_area)
        M = np.sqrt(w)[:, None] * SPEC.matrix(x) * np.sqrt(w)[None, :]
        vals, _ = oracle.jacobi_eigh(M)
        assert np.max(np.abs(np.sort(vals)[::-1][:10] - basis.eigenvalues)) <= 1e-8 * vals.max()

    def test_mercer_error_decreases(self):
        x = GRID.element_centroids()
        K = SPEC.matrix(x)
        full = build_kl_basis(GRID, SPEC, 30)
        errs = []
        for k in (1, 5, 10, 20, 30):
            part = KLBasis(full.eigenvalues[:k], full.modes[:k], full.weights)
            errs.append(np.linalg.norm(K - part.kernel_reconstruction()))
        assert np.all(np.diff(errs) < 0)

    def test_too_many_modes(self):
        with pytest.raises(ValueError):
            build_kl_basis(GRID, SPEC, GRID.n_elements + 1)

    def test_degenerate_spectrum_truncates(self):
        with pytest.warns(RuntimeWarning):
            b = build_kl_basis(StructuredGrid(4, 4), CovarianceSpec(1.0, 1e12), 8)
        assert b.k < 8

    def test_save_load(self, basis, tmp_path):
        path = tmp_path / "basis.npz"
        basis.save(path)
        back = KLBasis.load(path)
        assert np.array_equal(back.eigenvalues, basis.eigenvalues)
        assert np.array_equal(back.modes, basis.modes)
        assert back.grid_shape == (8, 8)
        assert back.spec == SPEC


class TestRealization:
    def test_zero_xi_constant(self, basis):
        e = realize_modulus(basis, ModulusTransform(), np.zeros(10))
        assert e == pytest.approx(np.full(GRID.n_elements, 1.0))
        raw = realize_modulus(basis, ModulusTransform(standardize=False), np.zeros(10))
        assert raw == pytest.approx(np.full(GRID.n_elements, 0.1 + 1.8 * normal_cdf(1.0)))

    def test_range(self, basis):
        xi = np.random.default_rng(0).normal(scale=3.0, size=(10_000, 10))
        for t in (ModulusTransform(), ModulusTransform(standardize=False)):
            e = realize_modulus(basis, t, xi)
            assert e.min() >= 0.1 and e.max() <= 1.9

    def test_single_mode(self, basis):
        one = KLBasis(basis.eigenvalues[:1], basis.modes[:1], basis.weights)
        by_hand = np.array([1.0 + np.sqrt(basis.eigenvalues[0]) * v for v in basis.modes[0]])
        assert gaussian_field(one, [1.0]) == pytest.approx(by_hand, rel=1e-15)

    def test_wrong_length(self, basis):
        with pytest.raises(ValueError):
            gaussian_field(basis, np.zeros(3))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 9), st.floats(-3, 3), st.floats(0.01, 2))
    def test_monotone_where_mode_positive(self, i, start, step):
        b = build_kl_basis(GRID, SPEC, 10)
        xi = np.zeros(10)
        xi[i] = start
        lo = realize_modulus(b, ModulusTransform(), xi)
        xi[i] += step
        hi = realize_modulus(b, ModulusTransform(), xi)
        pos = b.modes[i] > 0
        assert np.all(hi[pos] >= lo[pos])

    def test_normal_cdf_tails(self):
        assert normal_cdf(-30.0) > 0
        assert normal_cdf(0.0) == 0.5
        assert abs(normal_cdf(1.0) - 0.8413447460685429) <= 1e-12

    def test_transform_validates(self):
        with pytest.raises(ValueError):
            ModulusTransform(1.0, 0.5)
