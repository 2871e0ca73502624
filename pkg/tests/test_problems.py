"""Presets, cost oracles and assembled design problems."""
import numpy as np
import pytest

from drtopo import oracle
from drtopo.dro import CvarConfig, MomentConfig, WassersteinConfig
from drtopo.grid_fem import DensityFilter, ElasticModel, MaterialModel
from drtopo.kl_field import CovarianceSpec, ModulusTransform, build_kl_basis
from drtopo.presets import PRESETS, get_preset
from drtopo.problems import (
    ComplianceCost,
    DesignProblem,
    Formulation,
    MisfitCost,
    num_threads,
    parallel_map,
)
from drtopo.uncertainty import Empirical, ParameterSpace, ReferenceKernel, TruncatedGaussian


def small(name, nx, ny, solver="direct"):
    geo = get_preset(name).build(nx, ny)
    model = ElasticModel(geo.grid, MaterialModel(), geo.bc, geo.passive, solver=solver)
    return geo, model, DensityFilter(geo.grid, 1.5, model.active)


class TestPresets:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_builds_at_default_size(self, name):
        p = get_preset(name)
        geo = p.build(p.nx, p.ny)
        assert geo.grid.nx == p.nx and geo.grid.ny == p.ny
        assert len(geo.bc.dirichlet) > 0
        assert geo.nominal.ndim == 2

    def test_preset_defaults(self):
        assert get_preset("cantilever-2x1").volume_target == 0.6
        assert get_preset("bridge-1x2").volume_target == 0.245
        assert get_preset("bridge-1x2").default("C_T") == 40.0
        assert get_preset("cantilever-2x1").build(6, 3).nominal.tolist() == [[-1.0, 0.0]]

    def test_mast_law(self):
        geo = get_preset("mast-T").build(12, 18)
        assert geo.weights.tolist() == [0.5, 0.25, 0.25]
        assert geo.nominal.shape == (3, 8)
        assert len(geo.bc.patches) == 4

    def test_masked_volume(self):
        geo, model, _ = small("lbeam-1x1", 10, 10)
        assert len(geo.passive) == 36
        assert model.domain_volume == pytest.approx(1.0 - 0.36)
        assert model.volume(np.ones(100)) == pytest.approx(0.64)

    def test_gripper_regions(self):
        geo = get_preset("gripper-1x1").build(20, 20)
        chi, ut = geo.extra["chi"], geo.extra["u_target"]
        assert chi.sum() > 0
        assert np.all(ut[1::2] == 0) and np.all(ut[::2] <= 0)

    def test_unknown(self):
        with pytest.raises(ValueError, match="cantilever"):
            get_preset("arch")


class TestThreads:
    def test_env(self, monkeypatch):
        monkeypatch.setenv("DRTOPO_NUM_THREADS", "4")
        assert num_threads() == 4
        monkeypatch.setenv("DRTOPO_NUM_THREADS", "0")
        assert num_threads() == 1
        monkeypatch.setenv("DRTOPO_NUM_THREADS", "many")
        with pytest.raises(ValueError):
            num_threads()

    def test_order_kept(self):
        assert parallel_map(lambda x: x * x, range(20), threads=4) == [x * x for x in range(20)]

    def test_compliance_bits_independent_of_threads(self):
        geo, model, filt = small("mast-T", 8, 12, solver="cg")
        h = np.where(model.active, 0.4, 0.0)
        pts = np.vstack([geo.nominal, np.random.default_rng(0).normal(size=(5, 8))])
        out = [ComplianceCost(model, filt, threads=t).evaluate_batch(h, pts, grad=True) for t in (1, 3)]
        assert out[0][0].tobytes() == out[1][0].tobytes()
        assert out[0][1].tobytes() == out[1][1].tobytes()


class TestCosts:
    def test_compliance_gradient(self):
        geo, model, filt = small("cantilever-2x1", 6, 3)
        cost = ComplianceCost(model, filt)
        h = np.random.default_rng(2).uniform(0.2, 0.9, model.grid.n_elements)
        pts = np.array([[-1.0, 0.0], [0.3, 0.8]])
        _, g = cost.evaluate_batch(h, pts, grad=True)
        for i, xi in enumerate(pts):
            fd = oracle.finite_difference_gradient(
                lambda d: ComplianceCost(model, filt).evaluate_batch(d, xi[None])[0][0], h)
            assert np.linalg.norm(g[i] - fd) <= 1e-4 * np.linalg.norm(fd)

    def test_compliance_matches_direct_solve(self):
        geo, model, _ = small("bridge-1x2", 3, 6)
        cost = ComplianceCost(model)
        h = np.full(model.grid.n_elements, 0.5)
        xi = np.array([0.2, -1.0])
        K = model.assemble(h)
        f = model.load_matrix @ xi
        u, _, _ = model.solve(K, f)
        assert cost.evaluate_batch(h, xi[None])[0][0] == pytest.approx(f @ u, rel=1e-12)

    def test_misfit_gradient(self):
        geo, model, filt = small("gripper-1x1", 5, 5)
        basis = build_kl_basis(geo.grid, CovarianceSpec(), 4)
        cost = MisfitCost(model, basis, ModulusTransform(), geo.extra["load"], geo.extra["u_target"],
                          geo.extra["chi"], filt, 1e-2, 1e-2)
        h = np.random.default_rng(3).uniform(0.2, 0.9, 25)
        xi = np.array([[0.5, -0.3, 0.2, 0.1]])
        _, g = cost.evaluate_batch(h, xi, grad=True)
        fd = oracle.finite_difference_gradient(lambda d: cost.evaluate_batch(d, xi)[0][0], h)
        assert np.linalg.norm(g[0] - fd) <= 1e-4 * np.linalg.norm(fd)


class TestFormulation:
    def setup_method(self):
        self.space = ParameterSpace.ball([-1.0, 0.0], 5.0)
        self.emp = Empirical(np.array([[-1.0, 0.0]]))
        self.gauss = TruncatedGaussian(np.array([-1.0, 0.0]), 0.1 * np.eye(2), self.space)
        self.w = WassersteinConfig(0.5, 0.1, ReferenceKernel(0.1, self.space), n_inner=4)

    def test_validation(self):
        with pytest.raises(ValueError):
            Formulation("robust", self.emp)
        with pytest.raises(ValueError):
            Formulation("wasserstein", self.emp)
        with pytest.raises(ValueError):
            Formulation("moment", self.emp, moment=MomentConfig(np.zeros(2), np.eye(2), 1, 1, 0.1, self.space))
        with pytest.raises(ValueError):
            Formulation("cvar_dro", self.emp, cvar=CvarConfig(0.5, 1.0))

    def test_blocks(self):
        f = Formulation("cvar_dro", self.emp, cvar=CvarConfig(0.5, 1.0, 20.0, self.w))
        assert f.blocks == ("lam", "alpha")

    def _problem(self, form, vt=0.6):
        geo, model, filt = small("cantilever-2x1", 6, 3)
        return DesignProblem(ComplianceCost(model, filt), model, form, vt, seed=5)

    def test_frozen_batch(self):
        free = self._problem(Formulation("wasserstein", self.emp, wasserstein=self.w))
        frozen = self._problem(Formulation("wasserstein", self.emp, wasserstein=self.w, frozen=True))
        assert not np.array_equal(free.batch(0).points, free.batch(1).points)
        assert np.array_equal(frozen.batch(0).points, frozen.batch(7).points)

    def test_initial_blocks(self):
        p = self._problem(Formulation("cvar", self.gauss, cvar=CvarConfig(0.5, 1.0), n_samples=6), vt=None)
        b = p.initial_blocks()
        costs, _ = p.cost.evaluate_batch(b["h"], p.batch(0).flat_points())
        assert b["alpha"] == np.median(costs)
        assert np.all(b["h"] == 0.5)

    def test_evaluation_shapes(self):
        p = self._problem(Formulation("wasserstein", self.emp, wasserstein=self.w))
        ev = p.evaluate(p.initial_blocks(), 0)
        assert ev.grads["h"].shape == (18,)
        assert np.ndim(ev.grads["lam"]) == 0
        assert ev.equalities[0].name == "volume"
        assert "mean_cost" in ev.diagnostics

    def test_cvar_uses_inequality(self):
        p = self._problem(Formulation("cvar", self.gauss, cvar=CvarConfig(0.5, 1.0), n_samples=6), vt=None)
        ev = p.evaluate(p.initial_blocks(), 0)
        assert not ev.equalities
        assert ev.inequalities[0].name == "constraint"
        assert "cvar_exact" in ev.diagnostics
