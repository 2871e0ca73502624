"""Parameter spaces, nominal laws, reference measures and their sampling.

Every random draw comes from a counter-based Philox stream keyed by
``(master seed, iteration, atom)``; the ``j``-th sample of an atom is the
``j``-th accepted draw of that stream.  Results therefore do not depend on
the order in which atoms are processed or on how many workers process them.

A :class:`SampleBatch` carries log-weights next to its points, so the same
estimators run on Monte-Carlo batches (uniform weights) and on quadrature
batches (trapezoid weights times the reference density).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

#: draws attempted before the acceptance-rate check kicks in
_MIN_TRIALS = 4096
_MIN_ACCEPTANCE = 1e-3


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParameterSpace:
    """Compact set of admissible parameters: a closed ball or a box.

    Use :meth:`ball` or :meth:`box` rather than the raw constructor.
    """

    kind: str
    center: np.ndarray
    radius: float = 0.0
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    @classmethod
    def ball(cls, center, radius: float) -> "ParameterSpace":
        if radius <= 0:
            raise ValueError("ball radius must be positive")
        return cls("ball", np.atleast_1d(np.asarray(center, dtype=float)), float(radius))

    @classmethod
    def box(cls, lower, upper) -> "ParameterSpace":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box needs lower < upper componentwise")
        return cls("box", 0.5 * (lo + hi), 0.0, lo, hi)

    @property
    def dim(self) -> int:
        return self.center.size

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if self.kind == "ball":
            return np.sum((pts - self.center) ** 2, axis=-1) <= self.radius ** 2
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=-1)


@dataclass(frozen=True)
class Empirical:
    """Dirac mixture ``sum_i w_i delta_{atoms[i]}`` (equal weights by default)."""

    atoms: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        object.__setattr__(self, "atoms", atoms)
        w = np.full(len(atoms), 1.0 / len(atoms)) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (len(atoms),) or np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
            raise ValueError("empirical weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def check_support(self, space: ParameterSpace):
        if not np.all(space.contains(self.atoms)):
            raise ValueError("nominal atoms must lie inside the parameter space")


@dataclass(frozen=True)
class TruncatedGaussian:
    """Gaussian ``N(mean, cov)`` restricted to ``space``."""

    mean: np.ndarray
    cov: np.ndarray
    space: ParameterSpace

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match the mean")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance must be positive definite") from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


NominalLaw = Union[Empirical, TruncatedGaussian]


@dataclass(frozen=True)
class ReferenceKernel:
    """Transport reference ``nu_xi`` = ``N(xi, sigma2 I)`` restricted to ``space``."""

    sigma2: float
    space: ParameterSpace

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))


@dataclass(frozen=True)
class SampleBatch:
    """Points grouped by nominal atom, with log-weights summing to 0 per atom.

    ``points`` has shape ``(n_atoms, n, k)``, ``log_weights`` ``(n_atoms, n)``.
    """

    points: np.ndarray
    log_weights: np.ndarray
    seed: Optional[int] = None
    iteration: Optional[int] = None
    atoms: tuple = field(default=())

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def n_samples(self) -> int:
        return self.points.shape[1]

    def flat_points(self) -> np.ndarray:
        return self.points.reshape(-1, self.points.shape[-1])


def default_radius(sigma: float, center) -> float:
    """Default ball radius ``10 (sigma + |center|)``."""
    return 10.0 * (sigma + float(np.linalg.norm(center)))


def stream(seed: int, iteration: int = 0, atom: int = 0) -> np.random.Generator:
    """Independent Philox generator for one ``(seed, iteration, atom)`` key."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(iteration), int(atom)))
    return np.random.Generator(np.random.Philox(ss))


def _truncated_draws(rng: np.random.Generator, center, factor, space: ParameterSpace, n: int) -> np.ndarray:
    """``n`` accepted draws of ``center + z @ factor.T`` restricted to ``space``."""
    k = center.size
    out = np.empty((n, k))
    filled, trials = 0, 0
    block = max(2 * n, 64)
    while filled < n:
        z = rng.standard_normal((block, k))
        cand = center + z @ factor.T
        ok = cand[space.contains(cand)]
        take = min(len(ok), n - filled)
        out[filled:filled + take] = ok[:take]
        filled += take
        trials += block
        if trials >= _MIN_TRIALS and filled / trials < _MIN_ACCEPTANCE:
            raise SamplingError(
                f"rejection acceptance rate {filled / trials:.2e} below {_MIN_ACCEPTANCE:g}: "
                "the parameter space is too small for the sampling spread")
    return out


def sample_nu(kernel: ReferenceKernel, xi, n: int, seed: int, iteration: int = 0,
              atom: int = 0) -> SampleBatch:
    """``n`` draws from ``nu_xi`` for a single point ``xi``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if not kernel.space.contains(xi):
        raise ValueError("xi must lie inside the parameter space")
    factor = kernel.sigma * np.eye(xi.size)
    pts = _truncated_draws(stream(seed, iteration, atom), xi, factor, kernel.space, n)
    return SampleBatch(pts[None], np.full((1, n), -np.log(max(n, 1))), seed, iteration, (atom,))


def sample_nu_batch(kernel: ReferenceKernel, law: Empirical, n: int, seed: int,
                    iteration: int = 0) -> SampleBatch:
    """``n`` draws from ``nu_{xi^i}`` for every atom of ``law`` (one stream each)."""
    if n < 1:
        raise ValueError("need at least one inner sample per atom")
    pts = np.stack([
        _truncated_draws(stream(seed, iteration, i), a, kernel.sigma * np.eye(a.size), kernel.space, n)
        for i, a in enumerate(law.atoms)
    ])
    lw = np.full(pts.shape[:2], -np.log(n))
    return SampleBatch(pts, lw, seed, iteration, tuple(range(len(law.atoms))))


def sample_q0(law: TruncatedGaussian, n: int, seed: int, iteration: int = 0) -> SampleBatch:
    """``n`` draws from the truncated Gaussian (Cholesky transform, then rejection)."""
    k = law.dim
    if n == 0:
        return SampleBatch(np.zeros((1, 0, k)), np.zeros((1, 0)), seed, iteration, (0,))
    L = np.linalg.cholesky(law.cov)
    pts = _truncated_draws(stream(seed, iteration, 0), law.mean, L, law.space, n)
    return SampleBatch(pts[None], np.full((1, n), -np.log(n)), seed, iteration, (0,))


def log_mean_exp(values, axis=-1, log_weights=None):
    """``log(mean(exp(values)))`` without overflow.

    With ``log_weights`` the mean becomes ``sum(exp(log_weights) * exp(values))``.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("log_mean_exp of an empty array")
    if log_weights is None:
        a = v
        shift = -np.log(v.shape[axis])
    else:
        a = v + np.asarray(log_weights, dtype=float)
        shift = 0.0
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(a - m), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + m + shift
    return np.squeeze(out, axis=axis)


def softmax_weights(values, axis=-1, log_weights=None) -> np.ndarray:
    """Normalised ``exp(values)`` (times weights) along ``axis``; the gradient of :func:`log_mean_exp`."""
    v = np.asarray(values, dtype=float)
    a = v if log_weights is None else v + np.asarray(log_weights, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / np.sum(e, axis=axis, keepdims=True)


# -- quadrature batches ------------------------------------------------------------

def trapezoid_weights(nodes) -> np.ndarray:
    x = np.asarray(nodes, dtype=float)
    if x.ndim != 1 or len(x) < 2 or np.any(np.diff(x) <= 0):
        raise ValueError("quadrature nodes must be a strictly increasing 1-D array")
    w = np.empty_like(x)
    d = np.diff(x)
    w[0], w[-1] = d[0] / 2, d[-1] / 2
    w[1:-1] = (d[:-1] + d[1:]) / 2
    return w


def _tensor_nodes(nodes: Sequence) -> tuple:
    if isinstance(nodes, np.ndarray) and nodes.ndim == 1:
        nodes = [nodes]
    axes = [np.asarray(n, dtype=float) for n in nodes]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([g.ravel() for g in grids])
    w = trapezoid_weights(axes[0])
    for a in axes[1:]:
        w = np.multiply.outer(w, trapezoid_weights(a))
    return pts, np.log(np.ravel(w))


def _normalise(log_density, log_w, inside):
    lw = np.where(inside, log_density + log_w, -np.inf)
    return lw - log_mean_exp(lw, log_weights=np.zeros_like(lw))


def quadrature_nu(kernel: ReferenceKernel, law: Empirical, nodes) -> SampleBatch:
    """Trapezoid rule for ``nu_{xi^i}`` on a tensor grid (``nodes`` per axis).

    Nodes outside the parameter space get zero weight; the Gaussian factor is
    normalised by the same rule, so every atom's weights sum to 1.
    """
    pts, log_w = _tensor_nodes(nodes)
    if pts.shape[1] != law.dim:
        raise ValueError("quadrature grid dimension does not match the law")
    inside = kernel.space.contains(pts)
    lw = np.stack([
        _normalise(-np.sum((pts - a) ** 2, axis=1) / (2 * kernel.sigma2), log_w, inside)
        for a in law.atoms
    ])
    return SampleBatch(np.broadcast_to(pts, (len(law.atoms),) + pts.shape).copy(), lw)


def quadrature_q0(law: TruncatedGaussian, nodes) -> SampleBatch:
    """Trapezoid rule for the truncated Gaussian on a tensor grid."""
    pts, log_w = _tensor_nodes(nodes)
    if pts.shape[1] != law.dim:
        raise ValueError("quadrature grid dimension does not match the law")
    d = pts - law.mean
    quad = np.einsum("ni,ij,nj->n", d, np.linalg.inv(law.cov), d)
    lw = _normalise(-0.5 * quad, log_w, law.space.contains(pts))
    return SampleBatch(pts[None], lw[None])
