"""Dual functionals: Wasserstein, moment and CVaR."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drtopo import oracle
from drtopo.dro import (
    AnalyticCost,
    AugmentedPoint,
    CvarConfig,
    MomentConfig,
    WassersteinConfig,
    cvar_dro_constraint,
    cvar_dro_constraint_value,
    cvar_minimize,
    cvar_smoothed,
    cvar_value,
    mean_value,
    moment_dual,
    moment_dual_grad,
    moment_dual_value,
    softplus,
    softplus_derivative,
    wasserstein_dual,
    wasserstein_dual_grad,
    wasserstein_dual_value,
    wasserstein_primal_reconstruct,
)
from drtopo.suites import moment_dual_minimum
from drtopo.uncertainty import (
    Empirical,
    ParameterSpace,
    ReferenceKernel,
    SampleBatch,
    quadrature_nu,
    quadrature_q0,
    sample_nu_batch,
)

# design-dependent analytic cost: C(h, xi) = (h . a)(1 + |xi|^2) + h . b xi_0
A = np.array([0.5, 1.0, 1.5])
B = np.array([1.0, -0.5, 0.25])


def _f(h, pts):
    return (h @ A) * (1 + np.sum(pts ** 2, axis=1)) + (h @ B) * pts[:, 0]


def _df(h, pts):
    return np.outer(1 + np.sum(pts ** 2, axis=1), A) + np.outer(pts[:, 0], B)


COST = AnalyticCost(_f, _df)
H = np.array([0.3, 0.6, 0.2])


def constant(c0):
    return AnalyticCost(lambda h, pts: np.full(len(pts), c0))


def wsetup(m=0.5, eps=0.1, sigma2=0.1, n=8, k=2):
    space = ParameterSpace.ball(np.zeros(k), 20.0)
    cfg = WassersteinConfig(m, eps, ReferenceKernel(sigma2, space), n_inner=n)
    law = Empirical(np.array([[0.0] * (k - 1) + [-1.0], [0.5] * k]), np.array([0.7, 0.3]))
    return cfg, law, cfg.draw(law, seed=3)


class TestWasserstein:
    def test_constant_cost_infimum(self):
        cfg, law, batch = wsetup(m=50.0)
        lams = [1e-6, 1e-3, 1e-1, 1.0]
        vals = [wasserstein_dual_value(constant(2.0), H, AugmentedPoint(lam=l), cfg, law, batch=batch) for l in lams]
        assert vals[0] == pytest.approx(2.0, abs=1e-4)
        assert np.all(np.diff(vals) > 0)
        assert min(vals) >= 2.0

    def test_affine_in_radius(self):
        cfg, law, batch = wsetup(m=0.5)
        cfg2 = WassersteinConfig(0.8, cfg.eps, cfg.kernel, cfg.n_inner)
        pt = AugmentedPoint(lam=1.7)
        a = wasserstein_dual_value(COST, H, pt, cfg, law, batch=batch)
        b = wasserstein_dual_value(COST, H, pt, cfg2, law, batch=batch)
        assert b - a == pytest.approx(1.7 * 0.3, rel=1e-12)

    def test_matches_direct_quadrature(self):
        space = ParameterSpace.ball([0.0], 5.0)
        cfg = WassersteinConfig(0.5, 0.01, ReferenceKernel(0.1, space))
        law = Empirical(np.array([[0.0]]))
        x = np.linspace(-5, 5, 10_000)
        batch = quadrature_nu(cfg.kernel, law, x)
        cost = AnalyticCost(lambda h, pts: pts[:, 0] ** 2)
        grid = np.logspace(-3, 3, 64)
        vals = [wasserstein_dual_value(cost, None, AugmentedPoint(lam=l), cfg, law, batch=batch) for l in grid]
        lam = grid[int(np.argmin(vals))]
        nu = np.exp(-x ** 2 / 0.2)
        nu /= np.trapezoid(nu, x)
        direct = lam * 0.5 + lam * 0.01 * np.log(np.trapezoid(np.exp((x ** 2 - lam * x ** 2) / (lam * 0.01)) * nu, x))
        assert min(vals) == pytest.approx(direct, rel=1e-3)

    def test_flat_weights_at_large_entropy(self):
        cfg, law, batch = wsetup(eps=1e6)
        ev = wasserstein_dual(COST, H, AugmentedPoint(lam=1.0), cfg, law, batch)
        assert ev.weights == pytest.approx(np.full_like(ev.weights, 1 / batch.n_samples), rel=1e-5)
        plain = mean_value(COST, H, batch, law.weights)
        assert ev.design == pytest.approx(plain.design, rel=1e-5)

    def test_single_sample_weights(self):
        cfg, law, batch = wsetup(n=1)
        ev = wasserstein_dual(COST, H, AugmentedPoint(lam=2.0), cfg, law, batch)
        assert np.all(ev.weights == 1.0)
        pts = batch.flat_points()
        assert ev.design == pytest.approx(law.weights @ _df(H, pts))

    def test_gradients_finite_difference(self):
        cfg, law, batch = wsetup()
        g, glam = wasserstein_dual_grad(COST, H, AugmentedPoint(lam=1.3), cfg, law, batch=batch)
        fd = oracle.finite_difference_gradient(
            lambda d: wasserstein_dual_value(COST, d, AugmentedPoint(lam=1.3), cfg, law, batch=batch), H, 1e-6)
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)
        fl = oracle.finite_difference_gradient(
            lambda v: wasserstein_dual_value(COST, H, AugmentedPoint(lam=v[0]), cfg, law, batch=batch), [1.3], 1e-5)
        assert glam == pytest.approx(fl[0], rel=1e-4)

    def test_seeded_batches_reproducible(self):
        cfg, law, _ = wsetup()
        a = wasserstein_dual_value(COST, H, AugmentedPoint(lam=1.0), cfg, law, seed=7, iteration=2)
        b = wasserstein_dual_value(COST, H, AugmentedPoint(lam=1.0), cfg, law, seed=7, iteration=2)
        assert a == b

    def test_lambda_floor(self):
        cfg, law, batch = wsetup()
        with pytest.raises(ValueError):
            wasserstein_dual_value(COST, H, AugmentedPoint(lam=0.0), cfg, law, batch=batch)

    def test_atom_count_checked(self):
        cfg, law, batch = wsetup()
        other = Empirical(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            wasserstein_dual(COST, H, AugmentedPoint(), cfg, other, batch)


class TestReconstruction:
    def setup_method(self):
        self.space = ParameterSpace.ball([0.0], 6.0)
        self.cfg = WassersteinConfig(0.5, 0.05, ReferenceKernel(0.2, self.space))
        self.law = Empirical(np.array([[0.3]]))
        self.x = np.linspace(-6, 6, 6001)

    def test_constant_f(self):
        a = wasserstein_primal_reconstruct(np.full(self.x.size, 3.0), 1.0, self.cfg, self.law, self.x)
        b = quadrature_nu(self.cfg.kernel, self.law, self.x)
        base = np.exp(-(self.x - 0.3) ** 2 / self.cfg.eps)
        base /= np.exp(b.log_weights[0]) @ base
        keep = base > 1e-200
        assert a[0, keep] / base[keep] == pytest.approx(np.ones(keep.sum()), rel=1e-10)

    def test_concentrates_for_large_lambda(self):
        a = wasserstein_primal_reconstruct(self.x, 1e4, self.cfg, self.law, self.x)
        b = quadrature_nu(self.cfg.kernel, self.law, self.x)
        w = a[0] * np.exp(b.log_weights[0])
        spread = np.sqrt(w @ (self.x - 0.3) ** 2)
        assert spread < 0.2

    def test_tilted_mean(self):
        lam, eps, s2, xi = 2.0, self.cfg.eps, 0.2, 0.3
        a = wasserstein_primal_reconstruct(self.x, lam, self.cfg, self.law, self.x)
        b = quadrature_nu(self.cfg.kernel, self.law, self.x)
        mean = (a[0] * np.exp(b.log_weights[0])) @ self.x
        precision = 2.0 / eps + 1.0 / s2
        assert mean == pytest.approx(xi + 1.0 / (lam * eps * precision), abs=1e-6)

    def test_coarse_grid_rejected(self):
        with pytest.raises(ValueError):
            wasserstein_primal_reconstruct(np.zeros(32), 1.0, self.cfg, self.law, np.linspace(-6, 6, 32))
        with pytest.raises(ValueError, match="coarse|spanning"):
            x = np.linspace(-1, 1, 200)
            wasserstein_primal_reconstruct(np.zeros(200), 1.0, self.cfg, self.law, x)


def msetup(m1=0.5, m2=2.0, eps=0.2, n=12):
    space = ParameterSpace.ball([0.0, -1.0], 20.0)
    cfg = MomentConfig(np.array([0.0, -1.0]), 0.1 * np.eye(2), m1, m2, eps, space, n)
    return cfg, cfg.draw(seed=1)


class TestMoment:
    def test_constant_cost(self):
        cfg, batch = msetup()
        v = moment_dual_value(constant(1.5), H, AugmentedPoint(lam=0.0, tau=np.zeros(2), S=np.zeros((2, 2))),
                              cfg, batch=batch)
        assert v == pytest.approx(1.5, abs=1e-14)

    def test_affine_in_m2(self):
        cfg, batch = msetup(m2=2.0)
        cfg2 = MomentConfig(cfg.mu0, cfg.Sigma0, cfg.m1, 4.0, cfg.eps, cfg.space, cfg.n_samples)
        S = np.array([[0.3, 0.1], [0.1, 0.2]])
        pt = AugmentedPoint(lam=0.7, tau=np.array([0.2, 0.1]), S=S)
        a = moment_dual_value(COST, H, pt, cfg, batch=batch)
        b = moment_dual_value(COST, H, pt, cfg2, batch=batch)
        assert b - a == pytest.approx(2.0 * np.sum(S * cfg.Sigma0), rel=1e-12)

    def test_gradients_finite_difference(self):
        cfg, batch = msetup()
        tau, S = np.array([0.3, -0.2]), np.array([[0.4, 0.1], [0.1, 0.3]])
        g, gl, gt, gS = moment_dual_grad(COST, H, AugmentedPoint(lam=1.2, tau=tau, S=S), cfg, batch=batch)

        def v(h=H, lam=1.2, t=tau, s=S):
            return moment_dual_value(COST, h, AugmentedPoint(lam=lam, tau=t, S=s), cfg, batch=batch)

        for got, fd in [(g, oracle.finite_difference_gradient(lambda d: v(h=d), H)),
                        (gl, oracle.finite_difference_gradient(lambda x: v(lam=x[0]), [1.2])),
                        (gt, oracle.finite_difference_gradient(lambda x: v(t=x), tau)),
                        (gS, oracle.finite_difference_gradient(lambda x: v(s=x), S))]:
            assert np.linalg.norm(np.ravel(got) - fd) <= 1e-4 * np.linalg.norm(fd)

    def test_design_independent_cost(self):
        cfg, batch = msetup()
        cost = AnalyticCost(lambda h, pts: pts[:, 0] ** 2)
        g, *_ = moment_dual_grad(cost, H, AugmentedPoint(lam=1.0, tau=np.zeros(2), S=np.zeros((2, 2))), cfg,
                                 batch=batch)
        assert np.all(g == 0)

    def test_tau_gradient_vanishes_without_lambda(self):
        cfg, batch = msetup()
        _, _, gt, _ = moment_dual_grad(COST, H, AugmentedPoint(lam=0.0, tau=np.zeros(2), S=np.zeros((2, 2))), cfg,
                                       batch=batch)
        assert np.all(gt == 0)

    def test_affine_cost_matches_primal(self):
        space = ParameterSpace.ball([0.0], 8.0)
        cfg = MomentConfig(np.zeros(1), np.eye(1), 0.5, 2.0, 0.05, space)
        x = np.linspace(-8, 8, 2001)
        batch = quadrature_q0(cfg.reference_law, x)
        dual, _ = moment_dual_minimum(AnalyticCost(lambda h, pts: pts[:, 0]), cfg, batch)
        primal = oracle.primal_sup_moment_1d(lambda t: t, x, cfg)
        assert dual == pytest.approx(primal.value, rel=1e-2)

    def test_negative_lambda_rejected(self):
        cfg, batch = msetup()
        with pytest.raises(ValueError):
            moment_dual(COST, H, AugmentedPoint(lam=-1.0), cfg, batch)


class TestCvar:
    def test_four_samples(self):
        assert cvar_minimize([1, 2, 3, 4], 0.5)[0] == pytest.approx(3.5)
        assert cvar_value([1, 2, 3, 4], 0.5, 2.0) == pytest.approx(3.5)

    def test_small_beta_is_mean(self):
        s = np.array([0.3, 1.2, 2.5, 7.0])
        assert cvar_minimize(s, 1e-9)[0] == pytest.approx(s.mean(), rel=1e-8)

    @given(st.floats(0.01, 0.99), st.floats(-5, 5))
    def test_constant_samples(self, beta, c):
        assert cvar_minimize(np.full(5, c), beta)[0] == pytest.approx(c, abs=1e-12)

    @settings(max_examples=60)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.floats(0.01, 0.99))
    def test_var_below_cvar_and_optimal(self, samples, beta):
        c, alpha = cvar_minimize(samples, beta)
        assert alpha <= c + 1e-9
        for a in np.linspace(min(samples) - 1, max(samples) + 1, 25):
            assert cvar_value(samples, beta, a) >= c - 1e-9 * (1 + abs(c))

    def test_invalid_beta(self):
        with pytest.raises(ValueError):
            cvar_minimize([1.0], 1.0)

    def test_softplus(self):
        assert softplus(0.0) == 0.0
        assert softplus(100.0, 20.0) == pytest.approx(100.0, abs=1e-12)
        t = np.linspace(-5, 5, 100_001)
        assert np.max(np.abs(softplus(t, 20.0) - np.maximum(t, 0))) <= 0.02
        fd = (softplus(t + 1e-6) - softplus(t - 1e-6)) / 2e-6
        assert np.max(np.abs(softplus_derivative(t) - fd)) < 1e-6

    def test_smoothed_matches_exact_for_sharp_hinge(self):
        cfg = CvarConfig(0.6, 0.0, gamma=1e4)
        pts = np.random.default_rng(0).normal(size=(20, 2))
        batch = SampleBatch(pts[None], np.full((1, 20), -np.log(20)))
        costs = _f(H, pts)
        c, alpha = cvar_minimize(costs, 0.6)
        ev = cvar_smoothed(COST, H, alpha, cfg, batch)
        assert ev.value == pytest.approx(c, rel=1e-3)


class TestCvarDro:
    def setup_method(self):
        space = ParameterSpace.ball([0.0, -1.0], 20.0)
        self.w = WassersteinConfig(0.3, 0.2, ReferenceKernel(0.1, space), n_inner=6)
        self.law = Empirical(np.array([[0.0, -1.0]]))
        self.batch = sample_nu_batch(self.w.kernel, self.law, 6, seed=2)

    def test_constant_cost(self):
        w = WassersteinConfig(100.0, 0.2, self.w.kernel, 6, lambda_min=1e-9)
        cfg = CvarConfig(0.8, 0.0, 20.0, w)
        v = cvar_dro_constraint_value(constant(2.0), H, AugmentedPoint(lam=1e-9, alpha=2.0), cfg, self.law,
                                      batch=self.batch)
        assert v == pytest.approx(2.0, abs=1e-5)

    def test_small_beta_near_mean(self):
        w = WassersteinConfig(0.0, 1e-3, ReferenceKernel(1e-8, self.w.kernel.space), 6)
        cfg = CvarConfig(1e-6, 0.0, 200.0, w)
        batch = sample_nu_batch(w.kernel, self.law, 6, seed=2)
        mean = _f(H, batch.flat_points()).mean()
        v = cvar_dro_constraint_value(COST, H, AugmentedPoint(lam=1.0, alpha=0.0), cfg, self.law, batch=batch)
        assert v == pytest.approx(mean, rel=1e-2)

    def test_gradients_finite_difference(self):
        cfg = CvarConfig(0.7, 0.0, 5.0, self.w)
        costs = _f(H, self.batch.flat_points())
        alpha = float(np.median(costs))
        ev = cvar_dro_constraint(COST, H, AugmentedPoint(lam=0.8, alpha=alpha), cfg, self.law, self.batch)

        def v(h=H, lam=0.8, a=alpha):
            return cvar_dro_constraint_value(COST, h, AugmentedPoint(lam=lam, alpha=a), cfg, self.law,
                                             batch=self.batch)

        assert np.linalg.norm(ev.design - oracle.finite_difference_gradient(lambda d: v(h=d), H)) <= \
            1e-4 * np.linalg.norm(ev.design)
        assert ev.lam == pytest.approx(oracle.finite_difference_gradient(lambda x: v(lam=x[0]), [0.8])[0], rel=1e-4)
        assert ev.alpha == pytest.approx(oracle.finite_difference_gradient(lambda x: v(a=x[0]), [alpha])[0],
                                         rel=1e-4, abs=1e-8)

    def test_needs_wasserstein_config(self):
        with pytest.raises(ValueError):
            cvar_dro_constraint(COST, H, AugmentedPoint(), CvarConfig(0.5, 0.0), self.law, self.batch)
