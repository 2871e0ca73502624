"""Distributionally robust functionals and their gradients.

Each functional takes a cost oracle ``xi -> (C(h, xi), dC/dh)`` and an
augmented point holding the auxiliary dual variables:

* ``lam`` -- multiplier of the entropic Wasserstein (or moment) constraint,
* ``tau``, ``S`` -- moment multipliers (``|tau| <= 1``, ``S`` PSD),
* ``alpha`` -- CVaR anchor.

The integrals against the reference measures are estimated from a
:class:`~drtopo.uncertainty.SampleBatch`; with a quadrature batch the same
code evaluates the exact dual up to quadrature error.  Value and gradient of
one call share the batch, so finite differences on a frozen batch reproduce
the analytic gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import erf, expit

from .uncertainty import (
    Empirical,
    ParameterSpace,
    ReferenceKernel,
    SampleBatch,
    TruncatedGaussian,
    log_mean_exp,
    quadrature_nu,
    sample_nu_batch,
    sample_q0,
    softmax_weights,
)

LAMBDA_MIN = 1e-6


# -- cost oracles ---------------------------------------------------------------

class CostOracle:
    """Cost ``C(design, xi)`` and its design gradient at a batch of parameters.

    Subclasses implement :meth:`evaluate_batch`.
    """

    def evaluate_batch(self, design, points, grad=False):
        """Return ``(values, gradients)``; ``gradients`` is ``(n, n_design)`` or None."""
        raise NotImplementedError

    def evaluate(self, design, xi) -> float:
        v, _ = self.evaluate_batch(design, np.atleast_2d(xi))
        return float(v[0])

    def sensitivity(self, design, xi) -> np.ndarray:
        _, g = self.evaluate_batch(design, np.atleast_2d(xi), grad=True)
        return g[0]


class AnalyticCost(CostOracle):
    """Cost given by vectorised callables ``f(design, points)`` and ``df(design, points)``.

    ``df`` returns an ``(n, n_design)`` array; when omitted the cost is treated
    as independent of the design.
    """

    def __init__(self, f: Callable, df: Optional[Callable] = None):
        self.f = f
        self.df = df

    def evaluate_batch(self, design, points, grad=False):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        values = np.asarray(self.f(design, pts), dtype=float).reshape(len(pts))
        if not grad:
            return values, None
        if self.df is None:
            return values, np.zeros((len(pts), np.size(design)))
        return values, np.asarray(self.df(design, pts), dtype=float).reshape(len(pts), -1)


# -- configurations -----------------------------------------------------------------

@dataclass(frozen=True)
class WassersteinConfig:
    m: float
    eps: float
    kernel: ReferenceKernel
    n_inner: int = 10
    lambda_min: float = LAMBDA_MIN

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("Wasserstein radius must be nonnegative")
        if self.eps <= 0:
            raise ValueError("entropy weight eps must be positive")
        if self.lambda_min <= 0:
            raise ValueError("lambda_min must be positive")

    def draw(self, law: Empirical, seed: int, iteration: int = 0) -> SampleBatch:
        return sample_nu_batch(self.kernel, law, self.n_inner, seed, iteration)


@dataclass(frozen=True)
class MomentConfig:
    mu0: np.ndarray
    Sigma0: np.ndarray
    m1: float
    m2: float
    eps: float
    space: ParameterSpace
    n_samples: int = 10

    def __post_init__(self):
        object.__setattr__(self, "mu0", np.atleast_1d(np.asarray(self.mu0, dtype=float)))
        object.__setattr__(self, "Sigma0", np.atleast_2d(np.asarray(self.Sigma0, dtype=float)))
        if self.m1 < 0 or self.m2 <= 0:
            raise ValueError("moment bounds need m1 >= 0 and m2 > 0")
        if self.eps <= 0:
            raise ValueError("entropy weight eps must be positive")

    @property
    def reference_law(self) -> TruncatedGaussian:
        return TruncatedGaussian(self.mu0, self.Sigma0, self.space)

    def draw(self, seed: int, iteration: int = 0) -> SampleBatch:
        return sample_q0(self.reference_law, self.n_samples, seed, iteration)


@dataclass(frozen=True)
class CvarConfig:
    beta: float
    C_T: float
    gamma: float = 20.0
    wasserstein: Optional[WassersteinConfig] = None

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass
class AugmentedPoint:
    lam: float = 1.0
    tau: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    alpha: float = 0.0

    def copy(self) -> "AugmentedPoint":
        return replace(self,
                       tau=None if self.tau is None else np.array(self.tau, dtype=float),
                       S=None if self.S is None else np.array(self.S, dtype=float))


@dataclass
class DualEvaluation:
    """Value of a dual functional plus partial derivatives per block."""

    value: float
    design: Optional[np.ndarray] = None
    lam: float = 0.0
    tau: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    alpha: float = 0.0
    weights: Optional[np.ndarray] = field(default=None, repr=False)
    costs: Optional[np.ndarray] = field(default=None, repr=False)


# -- shared kernel -------------------------------------------------------------------

def _costs(cost: CostOracle, design, batch: SampleBatch, grad: bool):
    N, n, _ = batch.points.shape
    values, grads = cost.evaluate_batch(design, batch.flat_points(), grad=grad)
    values = values.reshape(N, n)
    if grads is not None:
        grads = grads.reshape(N, n, -1)
    return values, grads


def _entropic(f, c, lam, eps, atom_weights, log_w):
    """``lam eps sum_i p_i log int exp((f - lam c)/(lam eps)) dnu_i`` and its lam-derivative."""
    a = (f - lam * c) / (lam * eps)
    lme = log_mean_exp(a, axis=1, log_weights=log_w)
    w = softmax_weights(a, axis=1, log_weights=log_w)
    value = lam * eps * float(atom_weights @ lme)
    dlam = eps * float(atom_weights @ lme) - float(atom_weights @ np.sum(w * f, axis=1)) / lam
    return value, dlam, w


def _transport_cost(law: Empirical, batch: SampleBatch) -> np.ndarray:
    if batch.n_atoms != len(law.atoms):
        raise ValueError(f"batch has {batch.n_atoms} atom groups, law has {len(law.atoms)} atoms")
    return np.sum((batch.points - law.atoms[:, None, :]) ** 2, axis=-1)


def _check_lambda(lam, lambda_min):
    if lam < lambda_min:
        raise ValueError(f"lambda={lam!r} is below the floor lambda_min={lambda_min!r}")


# -- Wasserstein ---------------------------------------------------------------------

def wasserstein_dual(cost: CostOracle, design, pt: AugmentedPoint, cfg: WassersteinConfig,
                     law: Empirical, batch: SampleBatch, grad: bool = True) -> DualEvaluation:
    """Entropic Wasserstein dual ``lam m + lam eps E_P log E_nu exp((C - lam c)/(lam eps))``."""
    _check_lambda(pt.lam, cfg.lambda_min)
    C, dC = _costs(cost, design, batch, grad)
    c = _transport_cost(law, batch)
    val, dlam, w = _entropic(C, c, pt.lam, cfg.eps, law.weights, batch.log_weights)
    out = DualEvaluation(value=pt.lam * cfg.m + val, lam=cfg.m + dlam, weights=w, costs=C)
    if grad:
        out.design = np.einsum("i,ij,ijd->d", law.weights, w, dC)
    return out


def wasserstein_dual_value(cost, design, pt, cfg: WassersteinConfig, law: Empirical,
                           seed: int = 0, batch: Optional[SampleBatch] = None, iteration: int = 0) -> float:
    batch = cfg.draw(law, seed, iteration) if batch is None else batch
    return wasserstein_dual(cost, design, pt, cfg, law, batch, grad=False).value


def wasserstein_dual_grad(cost, design, pt, cfg: WassersteinConfig, law: Empirical,
                          seed: int = 0, batch: Optional[SampleBatch] = None, iteration: int = 0):
    """``(design gradient, d/dlambda)`` on the same batch as the value."""
    batch = cfg.draw(law, seed, iteration) if batch is None else batch
    ev = wasserstein_dual(cost, design, pt, cfg, law, batch, grad=True)
    return ev.design, ev.lam


def wasserstein_primal_reconstruct(f_values, lam: float, cfg: WassersteinConfig, law: Empirical,
                                   nodes) -> np.ndarray:
    """Optimal density ``alpha(xi^i, zeta)`` of the inner maximisation on a grid.

    ``alpha_i = exp((f - lam c_i)/(lam eps)) / int exp(...) dnu_i``, so the
    worst-case coupling is ``alpha pi_0``.  ``nodes`` is a 1-D grid (k=1) or a
    pair of axes (k=2); ``f_values`` is given on the flattened tensor grid.
    Returns an ``(n_atoms, n_nodes)`` array; with the quadrature weights of
    :func:`~drtopo.uncertainty.quadrature_nu` each row integrates to 1.
    """
    axes = [np.asarray(nodes, dtype=float)] if np.ndim(nodes[0]) == 0 else [np.asarray(a, float) for a in nodes]
    if law.dim not in (1, 2) or len(axes) != law.dim:
        raise ValueError("primal reconstruction is limited to k = 1 or 2 with one node array per axis")
    if min(len(a) for a in axes) < 64:
        raise ValueError("primal reconstruction needs at least 64 nodes per axis")
    _check_grid_resolution(cfg.kernel, law, axes)
    batch = quadrature_nu(cfg.kernel, law, axes if law.dim == 2 else axes[0])
    f = np.asarray(f_values, dtype=float).ravel()
    c = _transport_cost(law, batch)
    a = (f[None, :] - lam * c) / (lam * cfg.eps)
    log_norm = log_mean_exp(a, axis=1, log_weights=batch.log_weights)
    with np.errstate(over="ignore"):
        return np.exp(a - log_norm[:, None])


def _check_grid_resolution(kernel: ReferenceKernel, law: Empirical, axes):
    """Compare the trapezoid mass of each Gaussian factor with its erf closed form."""
    space = kernel.space
    if space.kind == "ball" and len(axes) > 1:
        raise ValueError("two-dimensional reconstruction requires a box parameter space")
    lo = space.center - space.radius if space.kind == "ball" else space.lower
    hi = space.center + space.radius if space.kind == "ball" else space.upper
    s = kernel.sigma
    for atom in law.atoms:
        for d, x in enumerate(axes):
            inside = (x >= lo[d] - 1e-12) & (x <= hi[d] + 1e-12)
            g = np.where(inside, np.exp(-(x - atom[d]) ** 2 / (2 * kernel.sigma2)), 0.0)
            quad = np.trapezoid(g, x)
            exact = s * np.sqrt(np.pi / 2) * (erf((hi[d] - atom[d]) / (s * np.sqrt(2)))
                                              - erf((lo[d] - atom[d]) / (s * np.sqrt(2))))
            if abs(quad / exact - 1.0) > 1e-6:
                raise ValueError(
                    f"quadrature grid too coarse or not spanning the parameter space: "
                    f"reference mass off by {abs(quad / exact - 1.0):.2e}")


# -- moments ---------------------------------------------------------------------------

def moment_dual(cost: CostOracle, design, pt: AugmentedPoint, cfg: MomentConfig, batch: SampleBatch,
                grad: bool = True) -> DualEvaluation:
    """``lam m1 - lam tau.mu0 + m2 S:Sigma0 + eps log E_Q0 exp((C + lam tau.xi - S:(xi-mu0)(xi-mu0)^T)/eps)``."""
    k = cfg.mu0.size
    tau = np.zeros(k) if pt.tau is None else np.asarray(pt.tau, dtype=float)
    S = np.zeros((k, k)) if pt.S is None else np.asarray(pt.S, dtype=float)
    if pt.lam < 0:
        raise ValueError("lambda must be nonnegative")
    C, dC = _costs(cost, design, batch, grad)
    C, xi, lw = C[0], batch.points[0], batch.log_weights[0]
    d = xi - cfg.mu0
    outer = np.einsum("ni,nj->nij", d, d)
    quad = np.einsum("ij,nij->n", S, outer)
    a = (C + pt.lam * xi @ tau - quad) / cfg.eps
    lme = float(log_mean_exp(a, log_weights=lw))
    w = softmax_weights(a, log_weights=lw)
    value = pt.lam * cfg.m1 - pt.lam * tau @ cfg.mu0 + cfg.m2 * np.sum(S * cfg.Sigma0) + cfg.eps * lme
    mean_xi = w @ xi
    out = DualEvaluation(
        value=float(value),
        lam=float(cfg.m1 - tau @ cfg.mu0 + tau @ mean_xi),
        tau=pt.lam * (mean_xi - cfg.mu0),
        S=cfg.m2 * cfg.Sigma0 - np.einsum("n,nij->ij", w, outer),
        weights=w[None],
        costs=C[None],
    )
    if grad:
        out.design = w @ dC[0]
    return out


def moment_dual_value(cost, design, pt, cfg: MomentConfig, seed: int = 0,
                      batch: Optional[SampleBatch] = None, iteration: int = 0) -> float:
    batch = cfg.draw(seed, iteration) if batch is None else batch
    return moment_dual(cost, design, pt, cfg, batch, grad=False).value


def moment_dual_grad(cost, design, pt, cfg: MomentConfig, seed: int = 0,
                     batch: Optional[SampleBatch] = None, iteration: int = 0):
    """``(design gradient, d/dlambda, d/dtau, d/dS)`` on the same batch as the value."""
    batch = cfg.draw(seed, iteration) if batch is None else batch
    ev = moment_dual(cost, design, pt, cfg, batch, grad=True)
    return ev.design, ev.lam, ev.tau, ev.S


# -- conditional value at risk ----------------------------------------------------------

def softplus(t, gamma: float = 20.0):
    """Smooth hinge ``t / (1 + exp(-gamma t))``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    t = np.asarray(t, dtype=float)
    return t * expit(gamma * t)


def softplus_derivative(t, gamma: float = 20.0):
    t = np.asarray(t, dtype=float)
    s = expit(gamma * t)
    return s + gamma * t * s * (1.0 - s)


def _sample_weights(samples, weights):
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("CVaR of an empty sample")
    if weights is None:
        return x, np.full(x.size, 1.0 / x.size)
    w = np.asarray(weights, dtype=float).ravel()
    return x, w / w.sum()


def cvar_value(samples, beta: float, alpha: float, weights=None) -> float:
    """``alpha + E[(X - alpha)_+] / (1 - beta)`` with the exact hinge."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    x, w = _sample_weights(samples, weights)
    return float(alpha + w @ np.maximum(x - alpha, 0.0) / (1.0 - beta))


def cvar_minimize(samples, beta: float, weights=None):
    """Minimise the CVaR representation over ``alpha`` for a discrete law.

    The objective is convex and piecewise linear with kinks at the samples;
    its smallest minimiser is the first sample whose cumulative weight reaches
    ``beta`` (the value at risk).  Returns ``(cvar, alpha_star)``.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    x, w = _sample_weights(samples, weights)
    order = np.argsort(x, kind="stable")
    cum = np.cumsum(w[order])
    k = int(np.searchsorted(cum, beta - 1e-12))
    alpha = float(x[order][min(k, len(x) - 1)])
    return cvar_value(x, beta, alpha, w), alpha


def cvar_minimize_density(nodes, pdf, beta: float):
    """CVaR of a continuous law with piecewise-linear density on ``nodes``.

    Minimises ``alpha + int (x - alpha)_+ p(x) dx / (1 - beta)`` by bounded
    Brent search; each cell integral is exact (Simpson on a cubic).
    Returns ``(cvar, alpha_star)``.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    x = np.asarray(nodes, dtype=float)
    p = np.asarray(pdf, dtype=float)
    p = p / np.trapezoid(p, x)
    x0, x1, p0, p1 = x[:-1], x[1:], p[:-1], p[1:]
    slope = (p1 - p0) / (x1 - x0)

    def objective(alpha):
        a = np.clip(alpha, x0, x1)
        m = 0.5 * (a + x1)

        def g(t):
            return (t - alpha) * (p0 + slope * (t - x0))

        tail = (x1 - a) / 6.0 * (g(a) + 4.0 * g(m) + g(x1))
        return alpha + np.sum(tail) / (1.0 - beta)

    res = minimize_scalar(objective, bounds=(x[0], x[-1]), method="bounded",
                          options={"xatol": 1e-12 * max(1.0, np.ptp(x)), "maxiter": 500})
    return float(res.fun), float(res.x)


def cvar_smoothed(cost: CostOracle, design, alpha: float, cfg: CvarConfig, batch: SampleBatch,
                  grad: bool = True) -> DualEvaluation:
    """Nominal-law CVaR surrogate ``alpha + E_P[softplus(C - alpha)] / (1 - beta)``."""
    C, dC = _costs(cost, design, batch, grad)
    C, lw = C.ravel(), batch.log_weights.ravel()
    p = np.exp(lw - log_mean_exp(lw, log_weights=np.zeros_like(lw)))
    t = C - alpha
    sp_ = softplus(t, cfg.gamma)
    dsp = softplus_derivative(t, cfg.gamma)
    out = DualEvaluation(value=float(alpha + p @ sp_ / (1 - cfg.beta)),
                         alpha=float(1.0 - p @ dsp / (1 - cfg.beta)), weights=p[None], costs=C[None])
    if grad:
        out.design = (p * dsp) @ dC.reshape(len(C), -1) / (1 - cfg.beta)
    return out


def cvar_dro_constraint(cost: CostOracle, design, pt: AugmentedPoint, cfg: CvarConfig, law: Empirical,
                        batch: SampleBatch, grad: bool = True) -> DualEvaluation:
    """``alpha + lam m/(1-beta) + lam eps/(1-beta) E_P log E_nu exp((softplus(C - alpha) - lam c)/(lam eps))``."""
    wcfg = cfg.wasserstein
    if wcfg is None:
        raise ValueError("CVaR-DRO constraint needs an embedded Wasserstein configuration")
    _check_lambda(pt.lam, wcfg.lambda_min)
    C, dC = _costs(cost, design, batch, grad)
    c = _transport_cost(law, batch)
    t = C - pt.alpha
    f = softplus(t, cfg.gamma)
    df = softplus_derivative(t, cfg.gamma)
    val, dlam, w = _entropic(f, c, pt.lam, wcfg.eps, law.weights, batch.log_weights)
    scale = 1.0 / (1.0 - cfg.beta)
    wd = law.weights[:, None] * w * df
    out = DualEvaluation(
        value=float(pt.alpha + scale * (pt.lam * wcfg.m + val)),
        lam=float(scale * (wcfg.m + dlam)),
        alpha=float(1.0 - scale * np.sum(wd)),
        weights=w,
        costs=C,
    )
    if grad:
        out.design = scale * np.einsum("ij,ijd->d", wd, dC)
    return out


def cvar_dro_constraint_value(cost, design, pt, cfg: CvarConfig, law: Empirical, seed: int = 0,
                              batch: Optional[SampleBatch] = None, iteration: int = 0) -> float:
    batch = cfg.wasserstein.draw(law, seed, iteration) if batch is None else batch
    return cvar_dro_constraint(cost, design, pt, cfg, law, batch, grad=False).value


def cvar_dro_constraint_grad(cost, design, pt, cfg: CvarConfig, law: Empirical, seed: int = 0,
                             batch: Optional[SampleBatch] = None, iteration: int = 0):
    """``(design gradient, d/dlambda, d/dalpha)`` on the same batch as the value."""
    batch = cfg.wasserstein.draw(law, seed, iteration) if batch is None else batch
    ev = cvar_dro_constraint(cost, design, pt, cfg, law, batch, grad=True)
    return ev.design, ev.lam, ev.alpha


def mean_value(cost: CostOracle, design, batch: SampleBatch, atom_weights=None, grad: bool = True) -> DualEvaluation:
    """Expected cost over a batch, atoms weighted by ``atom_weights``."""
    C, dC = _costs(cost, design, batch, grad)
    N = C.shape[0]
    pa = np.full(N, 1.0 / N) if atom_weights is None else np.asarray(atom_weights, dtype=float)
    w = np.exp(batch.log_weights - log_mean_exp(batch.log_weights, axis=1,
                                                log_weights=np.zeros_like(batch.log_weights))[:, None])
    pw = pa[:, None] * w
    out = DualEvaluation(value=float(np.sum(pw * C)), weights=w, costs=C)
    if grad:
        out.design = np.einsum("ij,ijd->d", pw, dC)
    return out
