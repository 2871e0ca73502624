"""Brute-force reference implementations used to validate the library.

Everything here is deliberately written without the production code paths:
quadrature instead of sampling, explicit loops instead of vectorised
assembly, Jacobi rotations instead of LAPACK.  They only scale to tiny
instances (``k <= 2``, a few hundred dofs).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import brentq


# -- generic -----------------------------------------------------------------------

def finite_difference_gradient(functional: Callable, point, step: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences of a scalar ``functional`` at ``point``.

    ``indices`` restricts the coordinates that are perturbed; the result has
    one entry per perturbed coordinate.
    """
    x = np.array(point, dtype=float)
    flat = x.ravel()
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        out.append((functional(xp.reshape(x.shape)) - functional(xm.reshape(x.shape))) / (2 * step))
    return np.asarray(out, dtype=float)


def dense_solve(A, b, tol: float = 1e-12) -> np.ndarray:
    """Solve a small system by pivoted LU and check the backward residual."""
    A = A.toarray() if hasattr(A, "toarray") else np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    x = lu_solve(lu_factor(A), b)
    r = np.linalg.norm(A @ x - b)
    bound = tol * (np.linalg.norm(A, 2) * np.linalg.norm(x) + np.linalg.norm(b))
    if not np.isfinite(r) or r > bound:
        raise RuntimeError(f"dense solve residual {r:.3e} exceeds {bound:.3e}")
    return x


def jacobi_eigh(A, tol: float = 1e-15, max_sweeps: int = 100):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` in ascending order, like
    :func:`numpy.linalg.eigh`.
    """
    a = np.array(A, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("jacobi_eigh needs a symmetric square matrix")
    v = np.eye(n)
    scale = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * cp - s * cq, s * cp + c * cq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * rp - s * rq, s * rp + c * rq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


# -- finite elements ----------------------------------------------------------------

def q4_stiffness_closed_form(nu: float, E: float = 1.0) -> np.ndarray:
    """Closed-form plane-stress stiffness of a unit square bilinear element.

    Nodes ordered counter-clockwise from the lower-left corner, dofs
    interleaved ``(x, y)`` per node.
    """
    k = np.array([1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
                  -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8])
    idx = np.array([
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ])
    return E / (1 - nu ** 2) * k[idx]


def misfit_quadrature(grid, u, u_target, chi) -> float:
    """``sum_e chi_e int_e |u - u_T|^2`` with bilinear interpolation at 2x2 Gauss points."""
    g = 1.0 / np.sqrt(3.0)
    total = 0.0
    du = (np.asarray(u, float) - np.asarray(u_target, float)).reshape(-1, 2)
    for ey in range(grid.ny):
        for ex in range(grid.nx):
            e = ey * grid.nx + ex
            if chi[e] == 0:
                continue
            corners = [grid.node(ex, ey), grid.node(ex + 1, ey), grid.node(ex + 1, ey + 1), grid.node(ex, ey + 1)]
            for s in (-g, g):
                for t in (-g, g):
                    N = 0.25 * np.array([(1 - s) * (1 - t), (1 + s) * (1 - t), (1 + s) * (1 + t), (1 - s) * (1 + t)])
                    val = N @ du[corners]
                    total += chi[e] * (val @ val) * grid.hx * grid.hy / 4.0
    return float(total)


# -- conditional value at risk ---------------------------------------------------------

def cvar_tail_average(samples, beta: float, weights=None) -> float:
    """Value at risk, then the mean of the upper ``1 - beta`` tail (atoms split at the quantile)."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty sample")
    w = np.full(x.size, 1.0 / x.size) if weights is None else np.asarray(weights, float) / np.sum(weights)
    order = np.argsort(x)
    x, w = x[order], w[order]
    cum = np.cumsum(w)
    k = int(np.argmax(cum >= beta - 1e-12))
    var = x[k]
    tail = (cum[k] - beta) * var + np.sum(w[k + 1:] * x[k + 1:])
    return float(tail / (1.0 - beta))


def cvar_tail_average_density(nodes, pdf, beta: float) -> float:
    """Tail average of a piecewise-linear density, with the quantile found in closed form."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    x = np.asarray(nodes, dtype=float)
    p = np.asarray(pdf, dtype=float)
    L = np.diff(x)
    s = np.diff(p) / L
    mass = 0.5 * (p[:-1] + p[1:]) * L
    total = mass.sum()
    p, s, mass = p / total, s / total, mass / total
    cdf = np.concatenate([[0.0], np.cumsum(mass)])
    k = min(int(np.searchsorted(cdf, beta, side="right")) - 1, len(L) - 1)
    # solve p_k t + s_k t^2 / 2 = beta - cdf_k for t in [0, L_k]
    r = beta - cdf[k]
    if abs(s[k]) < 1e-300:
        t = r / p[k]
    else:
        disc = p[k] ** 2 + 2.0 * s[k] * r
        t = 2.0 * r / (p[k] + np.sqrt(max(disc, 0.0)))
    var = x[k] + t

    def first_moment(a, pa, slope, length):
        return a * pa * length + (a * slope + pa) * length ** 2 / 2 + slope * length ** 3 / 3

    tail = first_moment(var, p[k] + s[k] * t, s[k], x[k + 1] - var)
    tail += np.sum(first_moment(x[k + 1:-1], p[k + 1:-1], s[k + 1:], L[k + 1:]))
    return float(tail / (1.0 - beta))


# -- Wasserstein primal ---------------------------------------------------------------

@dataclass
class WassersteinPrimal:
    value: float
    lam: float
    transport: float
    density: np.ndarray
    marginal: np.ndarray
    nodes: np.ndarray


def _interval(space):
    if space.kind == "ball":
        return float(space.center[0] - space.radius), float(space.center[0] + space.radius)
    return float(space.lower[0]), float(space.upper[0])


def primal_sup_wasserstein_1d(f, nodes, cfg, law, lam_grid=None) -> WassersteinPrimal:
    """Worst case of ``int f dQ`` over the entropic Wasserstein ball, by quadrature.

    For each ``lam`` the tilted coupling ``alpha pi_0`` with
    ``alpha ~ exp((f - lam c)/(lam eps))`` is formed; its transport cost
    ``W(lam) = sum_i p_i int (c + eps log alpha) alpha dnu_i`` decreases in
    ``lam``.  The returned law is the feasible member with the largest value,
    located by root finding on ``W(lam) = m`` when the constraint binds.
    ``density[i]`` is ``alpha_i`` on the nodes and ``marginal`` the Lebesgue
    density of ``Q*``.
    """
    x = np.asarray(nodes, dtype=float)
    if law.dim != 1 or x.ndim != 1 or len(x) < 1000:
        raise ValueError("the 1-D primal oracle needs k = 1 and at least 1000 nodes")
    fx = np.asarray(f(x) if callable(f) else f, dtype=float)
    lo, hi = _interval(cfg.kernel.space)
    inside = (x >= lo - 1e-12) & (x <= hi + 1e-12)
    atoms = law.atoms[:, 0]
    p = law.weights
    c = (x[None, :] - atoms[:, None]) ** 2
    ref = np.where(inside, np.exp(-c / (2 * cfg.kernel.sigma2)), 0.0)
    ref /= np.trapezoid(ref, x, axis=1)[:, None]
    eps, m = cfg.eps, cfg.m

    def tilt(lam):
        a = (fx[None, :] - lam * c) / (lam * eps)
        a = a - np.max(np.where(inside, a, -np.inf), axis=1, keepdims=True)
        e = np.where(inside, np.exp(a), 0.0)
        z = np.trapezoid(e * ref, x, axis=1)
        alpha = e / z[:, None]
        with np.errstate(divide="ignore"):
            log_alpha = np.where(inside, a - np.log(z)[:, None], 0.0)
        W = float(p @ np.trapezoid((c + eps * log_alpha) * alpha * ref, x, axis=1))
        F = float(p @ np.trapezoid(fx[None, :] * alpha * ref, x, axis=1))
        return W, F, alpha

    grid = np.logspace(-4, 4, 161) if lam_grid is None else np.sort(np.asarray(lam_grid, dtype=float))
    Ws = np.array([tilt(lam)[0] for lam in grid])
    feasible = Ws <= m
    if not feasible.any():
        raise ValueError(f"no feasible lambda on the grid: smallest transport cost {Ws.min():.6g} exceeds m={m}")
    first = int(np.argmax(feasible))
    if first == 0:
        lam = grid[0]
    else:
        t = brentq(lambda s: tilt(np.exp(s))[0] - m, np.log(grid[first - 1]), np.log(grid[first]),
                   xtol=1e-14, rtol=1e-14)
        lam = float(np.exp(t))
    W, F, alpha = tilt(lam)
    if W > m + 1e-9 * (1 + abs(m)):
        lam = grid[first]
        W, F, alpha = tilt(lam)
    marginal = p @ (alpha * ref)
    return WassersteinPrimal(F, float(lam), W, alpha, marginal, x)


# -- moment primal ---------------------------------------------------------------------

@dataclass
class MomentPrimal:
    value: float
    theta: float
    S: float
    mean: float
    second_moment: float
    density: np.ndarray
    nodes: np.ndarray


def primal_sup_moment_1d(f, nodes, cfg) -> MomentPrimal:
    """Worst case of ``int f dQ - eps KL(Q | Q0)`` over the 1-D moment set, by quadrature.

    The maximiser lies in the exponential family
    ``dQ/dQ0 ~ exp((f + theta xi - S (xi - mu0)^2) / eps)``, ``S >= 0``.
    Along the family the second moment decreases in ``S`` and the mean
    increases in ``theta``, so complementary slackness fixes both parameters:
    ``S`` is zero or makes the second-moment bound tight, and ``theta`` is
    zero or puts the mean on the boundary of ``[mu0 - m1, mu0 + m1]``.
    Both are found by bracketing and Brent root finding.
    """
    x = np.asarray(nodes, dtype=float)
    if cfg.mu0.size != 1 or x.ndim != 1 or len(x) < 1000:
        raise ValueError("the 1-D primal oracle needs k = 1 and at least 1000 nodes")
    fx = np.asarray(f(x) if callable(f) else f, dtype=float)
    mu, var, eps = float(cfg.mu0[0]), float(cfg.Sigma0[0, 0]), cfg.eps
    lo, hi = _interval(cfg.space)
    inside = (x >= lo - 1e-12) & (x <= hi + 1e-12)
    q0 = np.where(inside, np.exp(-(x - mu) ** 2 / (2 * var)), 0.0)
    q0 /= np.trapezoid(q0, x)
    d2 = (x - mu) ** 2
    bound2 = cfg.m2 * var

    def member(theta, S):
        a = (fx + theta * x - S * d2) / eps
        a = a - np.max(np.where(inside, a, -np.inf))
        e = np.where(inside, np.exp(a), 0.0)
        z = np.trapezoid(e * q0, x)
        alpha = e / z
        with np.errstate(divide="ignore"):
            log_alpha = np.where(inside, a - np.log(z), 0.0)
        dens = alpha * q0
        value = np.trapezoid((fx - eps * log_alpha) * dens, x)
        mean = np.trapezoid(x * dens, x)
        second = np.trapezoid(d2 * dens, x)
        return value, mean, second, dens

    def bracket(fun, start):
        """Smallest power-of-two multiple of ``start`` where ``fun`` changes sign."""
        b = start
        for _ in range(200):
            if fun(b) <= 0:
                return b
            b *= 2.0
        raise ValueError("could not bracket the complementary-slackness root")

    def S_of(theta):
        excess = lambda S: member(theta, S)[2] - bound2
        if excess(0.0) <= 0:
            return 0.0
        top = bracket(excess, 1e-3)
        return brentq(excess, 0.0, top, xtol=1e-15, rtol=1e-14)

    def mean_gap(theta):
        return member(theta, S_of(theta))[1] - mu

    g0 = mean_gap(0.0)
    if abs(g0) <= cfg.m1:
        theta = 0.0
    elif g0 > cfg.m1:
        fun = lambda t: mean_gap(-t) - cfg.m1
        top = bracket(fun, 1e-3)
        theta = -brentq(fun, 0.0, top, xtol=1e-15, rtol=1e-14)
    else:
        fun = lambda t: -cfg.m1 - mean_gap(t)
        top = bracket(fun, 1e-3)
        theta = brentq(fun, 0.0, top, xtol=1e-15, rtol=1e-14)
    S = S_of(theta)
    val, mean, second, dens = member(theta, S)
    return MomentPrimal(float(val), float(theta), float(S), float(mean), float(second), dens, x)
