"""Finite-element cost oracles and the wiring of formulations into the optimizer."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dro import (
    AugmentedPoint,
    CostOracle,
    CvarConfig,
    MomentConfig,
    WassersteinConfig,
    cvar_dro_constraint,
    cvar_minimize,
    cvar_smoothed,
    mean_value,
    moment_dual,
    wasserstein_dual,
)
from .grid_fem import DensityFilter, ElasticModel
from .kl_field import KLBasis, ModulusTransform, realize_modulus
from .optimizer import Constraint, Evaluation, OptimizationProblem
from .uncertainty import Empirical, SampleBatch, TruncatedGaussian, sample_q0

THREADS_ENV = "DRTOPO_NUM_THREADS"


def num_threads() -> int:
    """Worker count from ``DRTOPO_NUM_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def parallel_map(fn, items, threads: Optional[int] = None) -> list:
    """``[fn(x) for x in items]`` on a thread pool; results keep the input order."""
    items = list(items)
    n = num_threads() if threads is None else threads
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


class _DesignCache:
    """Single-entry cache keyed on the raw design bytes."""

    def __init__(self):
        self.key = None
        self.value = None

    def get(self, h, build):
        key = np.ascontiguousarray(h, dtype=float).tobytes()
        if key != self.key:
            self.value = build()
            self.key = key
        return self.value


class ComplianceCost(CostOracle):
    """Compliance ``C(h, xi) = xi^T B^T K(h)^-1 B xi`` for load parameters ``xi``.

    The load map ``B`` is linear, so one block solve ``U = K^-1 B`` per design
    serves every sample; the solves of the ``B`` columns run on the thread
    pool.  The design is filtered before interpolation and sensitivities are
    pulled back through the filter.
    """

    def __init__(self, model: ElasticModel, density_filter: Optional[DensityFilter] = None,
                 threads: Optional[int] = None):
        self.model = model
        self.filter = density_filter
        self.threads = threads
        self._cache = _DesignCache()
        self._warm = None

    def physical(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        return self.filter.apply(h) if self.filter is not None else h

    def _factor(self, h):
        rho = self.physical(h)
        K = self.model.assemble(rho)
        B = self.model.load_matrix
        warm = self._warm

        def column(c):
            x0 = None if warm is None else warm[:, c]
            u, _, _ = self.model.solve(K, B[:, c], x0=x0)
            return u

        U = np.column_stack(parallel_map(column, range(B.shape[1]), self.threads))
        self._warm = U
        return {"rho": rho, "U": U, "BtU": B.T @ U, "quad": None}

    def _quad(self, f):
        if f["quad"] is None:
            UE = f["U"][self.model.edofs]
            f["quad"] = np.einsum("eip,ij,ejq->epq", UE, self.model.K0, UE)
        return f["quad"]

    def solution(self, h):
        """``(rho, U)`` for the current design (cached)."""
        f = self._cache.get(h, lambda: self._factor(h))
        return f["rho"], f["U"]

    def evaluate_batch(self, design, points, grad=False):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        f = self._cache.get(design, lambda: self._factor(design))
        values = np.einsum("np,pq,nq->n", pts, f["BtU"], pts)
        if not grad:
            return values, None
        Q = self._quad(f)
        dscale = self.model.stiffness_scale_derivative(f["rho"])
        drho = -dscale[None, :] * np.einsum("np,epq,nq->ne", pts, Q, pts)
        if self.filter is not None:
            drho = np.asarray((self.filter.matrix.T @ drho.T).T)
        return values, drho


class MisfitCost(CostOracle):
    """Target-displacement misfit under a Karhunen-Loeve modulus field.

    ``J(h, xi) = (u - u_T)^T M_chi (u - u_T) + w_v Vol(h) + w_c f^T u`` with
    ``u`` solved for the modulus ``G(E~(x, xi))``.  One adjoint solve covers
    the misfit and the compliance penalty.
    """

    def __init__(self, model: ElasticModel, basis: KLBasis, transform: ModulusTransform, load,
                 u_target, chi, density_filter: Optional[DensityFilter] = None,
                 volume_weight: float = 0.0, compliance_weight: float = 0.0, threads: Optional[int] = None):
        self.model = model
        self.basis = basis
        self.transform = transform
        self.force = model.load_vector(load)
        self.u_target = np.asarray(u_target, dtype=float)
        self.chi = np.asarray(chi, dtype=float)
        self.M = model.assemble_mass(self.chi)
        self.filter = density_filter
        self.volume_weight = volume_weight
        self.compliance_weight = compliance_weight
        self.threads = threads

    def physical(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        return self.filter.apply(h) if self.filter is not None else h

    def _one(self, rho, h, xi, grad):
        E = realize_modulus(self.basis, self.transform, xi)
        K = self.model.assemble(rho, E)
        u, _, _ = self.model.solve(K, self.force)
        d = u - self.u_target
        value = d @ (self.M @ d) + self.volume_weight * self.model.volume(h) + self.compliance_weight * (self.force @ u)
        if not grad:
            return value, None
        rhs = -(2.0 * (self.M @ d) + self.compliance_weight * self.force)
        p, _, _ = self.model.solve(K, rhs)
        drho = self.model.stiffness_scale_derivative(rho, E) * self.model.element_energy(u, p)
        g = self.filter.backprop(drho) if self.filter is not None else drho
        return value, g + self.volume_weight * self.model.volume_sensitivity()

    def evaluate_batch(self, design, points, grad=False):
        h = np.asarray(design, dtype=float)
        rho = self.physical(h)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = parallel_map(lambda xi: self._one(rho, h, xi, grad), pts, self.threads)
        values = np.array([v for v, _ in out])
        return values, (np.array([g for _, g in out]) if grad else None)


# -- formulations -------------------------------------------------------------------

FORMULATIONS = ("deterministic", "mean", "wasserstein", "moment", "cvar", "cvar_dro")


@dataclass
class Formulation:
    """Which functional is minimised and with which ambiguity parameters.

    ``law`` is the nominal law: an :class:`Empirical` mixture for the
    deterministic, mean, Wasserstein and CVaR-DRO cases, a
    :class:`TruncatedGaussian` for the moment and plain CVaR cases (and
    optionally for ``mean``).
    """

    kind: str
    law: object
    wasserstein: Optional[WassersteinConfig] = None
    moment: Optional[MomentConfig] = None
    cvar: Optional[CvarConfig] = None
    n_samples: int = 10
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in FORMULATIONS:
            raise ValueError(f"unknown formulation {self.kind!r}; expected one of {FORMULATIONS}")
        need = {"wasserstein": self.wasserstein, "moment": self.moment, "cvar": self.cvar,
                "cvar_dro": self.cvar}
        if self.kind in need and need[self.kind] is None:
            raise ValueError(f"formulation {self.kind!r} needs its configuration")
        if self.kind == "cvar_dro" and self.cvar.wasserstein is None:
            raise ValueError("cvar_dro needs a Wasserstein configuration inside CvarConfig")
        if self.kind in ("moment", "cvar") and not isinstance(self.law, TruncatedGaussian):
            raise ValueError(f"formulation {self.kind!r} needs a Gaussian nominal law")
        if self.kind in ("deterministic", "wasserstein", "cvar_dro") and not isinstance(self.law, Empirical):
            raise ValueError(f"formulation {self.kind!r} needs an empirical nominal law")

    @property
    def blocks(self):
        return {"deterministic": (), "mean": (), "wasserstein": ("lam",), "moment": ("lam", "tau", "S"),
                "cvar": ("alpha",), "cvar_dro": ("lam", "alpha")}[self.kind]


def _single_atom_batch(points) -> SampleBatch:
    pts = np.atleast_2d(points)
    return SampleBatch(pts[:, None, :], np.zeros((len(pts), 1)))


@dataclass
class DesignProblem:
    """Cost oracle, volume data and formulation for one optimisation run."""

    cost: CostOracle
    model: ElasticModel
    formulation: Formulation
    volume_target: Optional[float]
    seed: int = 0
    initial_density: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def batch(self, iteration: int) -> SampleBatch:
        f = self.formulation
        it = 0 if f.frozen else iteration
        if f.kind in ("wasserstein", "cvar_dro"):
            cfg = f.wasserstein if f.kind == "wasserstein" else f.cvar.wasserstein
            return cfg.draw(f.law, self.seed, it)
        if f.kind == "moment":
            return f.moment.draw(self.seed, it)
        if f.kind == "cvar" or (f.kind == "mean" and isinstance(f.law, TruncatedGaussian)):
            return sample_q0(f.law, f.n_samples, self.seed, it)
        return _single_atom_batch(f.law.atoms)

    def initial_blocks(self) -> dict:
        m = self.model
        if self.initial_density is not None:
            frac = self.initial_density
        elif self.volume_target is not None:
            frac = self.volume_target / m.domain_volume
        else:
            frac = 0.5
        h = np.where(m.active, frac, 0.0)
        blocks = {"h": h}
        f = self.formulation
        if "lam" in f.blocks:
            blocks["lam"] = 1.0
        if "tau" in f.blocks:
            k = f.moment.mu0.size
            blocks["tau"] = np.zeros(k)
            blocks["S"] = np.zeros((k, k))
        if "alpha" in f.blocks:
            costs, _ = self.cost.evaluate_batch(h, self.batch(0).flat_points())
            blocks["alpha"] = float(np.median(costs))
        return blocks

    def evaluate(self, blocks, iteration: int) -> Evaluation:
        f = self.formulation
        h = np.asarray(blocks["h"], dtype=float)
        batch = self.batch(iteration)
        pt = AugmentedPoint(lam=float(blocks.get("lam", 1.0)), tau=blocks.get("tau"), S=blocks.get("S"),
                            alpha=float(blocks.get("alpha", 0.0)))
        eqs, ineqs, diag = [], [], {}
        if f.kind in ("deterministic", "mean"):
            weights = f.law.weights if isinstance(f.law, Empirical) else None
            ev = mean_value(self.cost, h, batch, weights)
            obj, grads = ev.value, {"h": ev.design}
        elif f.kind == "wasserstein":
            ev = wasserstein_dual(self.cost, h, pt, f.wasserstein, f.law, batch)
            obj, grads = ev.value, {"h": ev.design, "lam": ev.lam}
            diag["mean_cost"] = float(f.law.weights @ ev.costs.mean(axis=1))
        elif f.kind == "moment":
            ev = moment_dual(self.cost, h, pt, f.moment, batch)
            obj, grads = ev.value, {"h": ev.design, "lam": ev.lam, "tau": ev.tau, "S": ev.S}
            diag["mean_cost"] = float(ev.costs.mean())
        else:
            obj, grads = self.model.volume(h), {"h": self.model.volume_sensitivity()}
            if f.kind == "cvar":
                ev = cvar_smoothed(self.cost, h, pt.alpha, f.cvar, batch)
                ineqs.append(Constraint(ev.value - f.cvar.C_T, {"h": ev.design, "alpha": ev.alpha}, "constraint"))
            else:
                ev = cvar_dro_constraint(self.cost, h, pt, f.cvar, f.law, batch)
                ineqs.append(Constraint(ev.value - f.cvar.C_T, {"h": ev.design, "lam": ev.lam, "alpha": ev.alpha},
                                        "constraint"))
            diag["cvar_exact"] = cvar_minimize(ev.costs.ravel(), f.cvar.beta)[0]
        if self.volume_target is not None and f.kind not in ("cvar", "cvar_dro"):
            eqs.append(Constraint(self.model.volume(h) - self.volume_target,
                                  {"h": self.model.volume_sensitivity()}, "volume"))
        return Evaluation(obj, grads, eqs, ineqs, diag)

    def optimization_problem(self) -> OptimizationProblem:
        return OptimizationProblem(evaluate=self.evaluate, initial=self.initial_blocks(),
                                   fixed=~self.model.active, volume=self.model.volume)
