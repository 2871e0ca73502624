"""Reference implementations checked against closed forms."""
import numpy as np
import pytest
from scipy.stats import norm

from drtopo import oracle
from drtopo.dro import MomentConfig, WassersteinConfig
from drtopo.grid_fem import StructuredGrid
from drtopo.uncertainty import Empirical, ParameterSpace, ReferenceKernel


class TestGeneric:
    def test_finite_difference_quadratic(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        x = np.array([0.3, -0.7])
        g = oracle.finite_difference_gradient(lambda v: 0.5 * v @ A @ v, x)
        assert g == pytest.approx(A @ x, abs=1e-9)
        assert oracle.finite_difference_gradient(lambda v: v[1] ** 2, x, indices=[1]) == pytest.approx([-1.4])

    def test_dense_solve(self):
        A = np.array([[4.0, 1.0], [1.0, 3.0]])
        assert oracle.dense_solve(A, [1.0, 2.0]) == pytest.approx(np.linalg.solve(A, [1.0, 2.0]))

    @pytest.mark.filterwarnings("ignore")
    def test_dense_solve_singular(self):
        with pytest.raises(RuntimeError):
            oracle.dense_solve(np.array([[1.0, 1.0], [1.0, 1.0]]), [1.0, 0.0])

    def test_jacobi(self):
        rng = np.random.default_rng(1)
        B = rng.normal(size=(7, 7))
        A = B + B.T
        w, V = oracle.jacobi_eigh(A)
        assert w == pytest.approx(np.linalg.eigvalsh(A), abs=1e-12)
        assert V.T @ A @ V == pytest.approx(np.diag(w), abs=1e-11)

    def test_jacobi_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            oracle.jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestElement:
    def test_closed_form_properties(self):
        K = oracle.q4_stiffness_closed_form(0.3)
        assert K == pytest.approx(K.T)
        rigid = np.array([[1, 0] * 4, [0, 1] * 4, [0, 0, 1, 0, 1, 1, 0, 1]], dtype=float)
        # rotation about the lower-left node: u = -y, v = x
        rigid[2] = [0, 0, 0, 1, -1, 1, -1, 0]
        assert np.abs(K @ rigid.T).max() <= 1e-14
        assert np.sum(np.linalg.eigvalsh(K) > 1e-12) == 5

    def test_misfit_of_constant_displacement(self):
        grid = StructuredGrid(3, 2, 1.5, 1.0)
        u = np.tile([0.3, -0.4], grid.n_nodes)
        chi = np.ones(grid.n_elements)
        assert oracle.misfit_quadrature(grid, u, np.zeros_like(u), chi) == pytest.approx(0.25 * 1.5)


class TestCvar:
    def test_discrete(self):
        assert oracle.cvar_tail_average([4, 1, 3, 2], 0.5) == pytest.approx(3.5)
        assert oracle.cvar_tail_average([1.0, 2.0], 0.5, weights=[3, 1]) == pytest.approx(1.5)

    def test_uniform_density(self):
        x = np.linspace(0, 1, 11)
        assert oracle.cvar_tail_average_density(x, np.ones_like(x), 0.3) == pytest.approx(0.65, rel=1e-12)

    def test_normal_density(self):
        x = np.linspace(-10, 10, 20001)
        beta = 0.9
        exact = norm.pdf(norm.ppf(beta)) / (1 - beta)
        assert oracle.cvar_tail_average_density(x, norm.pdf(x), beta) == pytest.approx(exact, rel=1e-6)

    def test_beta_range(self):
        with pytest.raises(ValueError):
            oracle.cvar_tail_average([1.0], 0.0)


class TestWassersteinPrimal:
    def setup_method(self):
        self.space = ParameterSpace.ball([0.0], 6.0)
        self.law = Empirical(np.array([[0.0]]))
        self.x = np.linspace(-6, 6, 4001)

    def test_constant_f(self):
        cfg = WassersteinConfig(1.0, 0.1, ReferenceKernel(0.2, self.space))
        res = oracle.primal_sup_wasserstein_1d(lambda t: np.full_like(t, 2.0), self.x, cfg, self.law)
        assert res.value == pytest.approx(2.0, rel=1e-12)
        assert res.transport <= 1.0

    def test_budget_binds_for_linear_f(self):
        cfg = WassersteinConfig(0.5, 0.1, ReferenceKernel(0.2, self.space))
        res = oracle.primal_sup_wasserstein_1d(lambda t: t, self.x, cfg, self.law)
        assert res.transport == pytest.approx(0.5, abs=1e-8)
        assert np.trapezoid(res.marginal, self.x) == pytest.approx(1.0, rel=1e-10)
        assert res.value == pytest.approx(np.trapezoid(self.x * res.marginal, self.x), rel=1e-10)
        bigger = oracle.primal_sup_wasserstein_1d(lambda t: t, self.x,
                                                  WassersteinConfig(1.0, 0.1, cfg.kernel), self.law)
        assert bigger.value > res.value

    def test_infeasible_radius(self):
        cfg = WassersteinConfig(0.0, 0.1, ReferenceKernel(0.2, self.space))
        with pytest.raises(ValueError, match="feasible"):
            oracle.primal_sup_wasserstein_1d(lambda t: t, self.x, cfg, self.law)

    def test_needs_fine_grid(self):
        cfg = WassersteinConfig(0.5, 0.1, ReferenceKernel(0.2, self.space))
        with pytest.raises(ValueError):
            oracle.primal_sup_wasserstein_1d(lambda t: t, np.linspace(-6, 6, 50), cfg, self.law)


class TestMomentPrimal:
    def setup_method(self):
        self.space = ParameterSpace.ball([0.0], 8.0)
        self.x = np.linspace(-8, 8, 2001)

    def cfg(self, m1, m2, eps=0.1):
        return MomentConfig(np.zeros(1), np.eye(1), m1, m2, eps, self.space)

    def test_zero_cost_is_reference(self):
        res = oracle.primal_sup_moment_1d(lambda t: 0.0 * t, self.x, self.cfg(0.5, 2.0))
        assert res.theta == 0 and res.S == 0
        assert res.value == pytest.approx(0.0, abs=1e-10)
        assert res.second_moment == pytest.approx(1.0, rel=1e-8)

    def test_mean_bound_binds(self):
        res = oracle.primal_sup_moment_1d(lambda t: t, self.x, self.cfg(0.5, 5.0))
        assert res.mean == pytest.approx(0.5, abs=1e-9)
        assert res.second_moment <= 5.0 + 1e-9
        assert res.theta < 0

    def test_second_moment_binds(self):
        res = oracle.primal_sup_moment_1d(lambda t: t ** 2, self.x, self.cfg(0.5, 2.0))
        assert res.second_moment == pytest.approx(2.0, abs=1e-9)
        assert res.S > 0
        assert abs(res.mean) <= 0.5 + 1e-9
