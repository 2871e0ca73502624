"""Plane-stress linear elasticity on structured quadrilateral grids.

Bilinear (Q4) elements, SIMP interpolation ``eta + (1 - eta) * h**p`` of the
stiffness, Dirichlet conditions by elimination and constant tractions on
patches of boundary edges.

Numbering conventions
---------------------
Node ``(i, j)`` sits at ``(i * hx, j * hy)`` and has index ``j * (nx + 1) + i``.
Element ``(ix, jy)`` has index ``jy * nx + ix`` and its four nodes are listed
counter-clockwise from the lower-left corner.  Node ``n`` carries the degrees
of freedom ``2n`` (x) and ``2n + 1`` (y).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)


class SolverError(RuntimeError):
    """Raised when the iterative solver does not reach its tolerance."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class StructuredGrid:
    """Rectangular box ``[0, lx] x [0, ly]`` split into ``nx * ny`` elements."""

    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid needs at least one element per axis, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("grid dimensions must be positive")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def element_area(self) -> float:
        return self.hx * self.hy

    def node(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    def node_coordinates(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.nx + 1), np.arange(self.ny + 1))
        return np.column_stack([i.ravel() * self.hx, j.ravel() * self.hy])

    def element_nodes(self) -> np.ndarray:
        """``(n_elements, 4)`` node indices, counter-clockwise."""
        ix, jy = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        ix, jy = ix.ravel(), jy.ravel()
        return np.column_stack([
            self.node(ix, jy),
            self.node(ix + 1, jy),
            self.node(ix + 1, jy + 1),
            self.node(ix, jy + 1),
        ])

    def element_dofs(self) -> np.ndarray:
        nodes = self.element_nodes()
        dofs = np.empty((self.n_elements, 8), dtype=np.int64)
        dofs[:, 0::2] = 2 * nodes
        dofs[:, 1::2] = 2 * nodes + 1
        return dofs

    def element_centroids(self) -> np.ndarray:
        ix, jy = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        return np.column_stack([(ix.ravel() + 0.5) * self.hx, (jy.ravel() + 0.5) * self.hy])

    def nodes_where(self, predicate) -> np.ndarray:
        """Indices of nodes whose coordinates satisfy ``predicate(x, y)``."""
        xy = self.node_coordinates()
        return np.flatnonzero(predicate(xy[:, 0], xy[:, 1]))

    def elements_where(self, predicate) -> np.ndarray:
        c = self.element_centroids()
        return np.flatnonzero(predicate(c[:, 0], c[:, 1]))

    def horizontal_edges(self, y: float, x_lo: float, x_hi: float) -> np.ndarray:
        """Edges along the grid line at height ``y`` whose midpoint lies in [x_lo, x_hi]."""
        j = int(round(y / self.hy))
        tol = 1e-9 * self.lx
        mids = (np.arange(self.nx) + 0.5) * self.hx
        i = np.flatnonzero((mids >= x_lo - tol) & (mids <= x_hi + tol))
        return np.column_stack([self.node(i, j), self.node(i + 1, j)])

    def vertical_edges(self, x: float, y_lo: float, y_hi: float) -> np.ndarray:
        """Edges along the grid line at abscissa ``x`` whose midpoint lies in [y_lo, y_hi]."""
        i = int(round(x / self.hx))
        tol = 1e-9 * self.ly
        mids = (np.arange(self.ny) + 0.5) * self.hy
        j = np.flatnonzero((mids >= y_lo - tol) & (mids <= y_hi + tol))
        return np.column_stack([self.node(i, j), self.node(i, j + 1)])


@dataclass(frozen=True)
class MaterialModel:
    """Isotropic plane-stress material with SIMP interpolation parameters."""

    E: float = 1.0
    nu: float = 0.3
    eta: float = 1e-3
    p: float = 3.0

    def __post_init__(self):
        if self.E <= 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")
        if not 0.0 < self.eta < 1.0:
            raise ValueError("void stiffness fraction eta must lie in (0, 1)")
        if self.p < 1.0:
            raise ValueError("SIMP exponent must be >= 1")

    def lame(self):
        """Plane-stress Lamé pair ``(mu, lambda)``."""
        mu = self.E / (2.0 * (1.0 + self.nu))
        lam = self.E * self.nu / (1.0 - self.nu ** 2)
        return mu, lam

    def constitutive_matrix(self, E: Optional[float] = None) -> np.ndarray:
        E = self.E if E is None else E
        nu = self.nu
        return E / (1.0 - nu ** 2) * np.array([
            [1.0, nu, 0.0],
            [nu, 1.0, 0.0],
            [0.0, 0.0, 0.5 * (1.0 - nu)],
        ])

    def interpolation(self, h):
        h = np.asarray(h, dtype=float)
        return self.eta + (1.0 - self.eta) * h ** self.p

    def interpolation_derivative(self, h):
        h = np.asarray(h, dtype=float)
        return self.p * (1.0 - self.eta) * h ** (self.p - 1.0)


@dataclass
class LoadPatch:
    """Set of boundary edges receiving one constant traction vector."""

    name: str
    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(self.edges) == 0:
            raise ValueError(f"load patch {self.name!r} has no edges")


@dataclass
class BoundaryConditions:
    """Clamped nodes plus traction patches.

    The load parameter ``xi`` handed to the solver stacks one 2-vector per
    patch, in the order of ``patches``.  ``extra_dofs`` fixes single
    components (rollers) on top of the fully clamped ``dirichlet`` nodes.
    """

    dirichlet: np.ndarray
    patches: Sequence[LoadPatch]
    extra_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.dirichlet = np.unique(np.asarray(self.dirichlet, dtype=np.int64))
        self.extra_dofs = np.unique(np.asarray(self.extra_dofs, dtype=np.int64))
        self.patches = list(self.patches)
        if len(self.dirichlet_dofs()) < 3:
            raise ValueError("at least 3 constrained degrees of freedom are needed to remove rigid-body modes")
        loaded = np.unique(np.concatenate([p.edges.ravel() for p in self.patches])) if self.patches else []
        clash = np.intersect1d(loaded, self.dirichlet)
        if len(clash):
            raise ValueError(f"Dirichlet and Neumann node sets overlap at nodes {clash[:5].tolist()}")

    @property
    def n_load_params(self) -> int:
        return 2 * len(self.patches)

    def dirichlet_dofs(self) -> np.ndarray:
        return np.unique(np.concatenate([2 * self.dirichlet, 2 * self.dirichlet + 1, self.extra_dofs]))


@dataclass
class ElasticState:
    """Solved displacement (and optional adjoint) for one design and load."""

    u: np.ndarray
    energy: np.ndarray
    xi: Optional[np.ndarray] = None
    adjoint: Optional[np.ndarray] = None
    iterations: int = 0
    residual: float = 0.0
    h: Optional[np.ndarray] = field(default=None, repr=False)


def element_stiffness(hx: float, hy: float, nu: float, E: float = 1.0) -> np.ndarray:
    """8x8 Q4 plane-stress stiffness of an ``hx`` by ``hy`` element (2x2 Gauss)."""
    D = MaterialModel(E=E, nu=nu).constitutive_matrix()
    Ke = np.zeros((8, 8))
    for s in _GAUSS:
        for t in _GAUSS:
            dN_ds = 0.25 * np.array([-(1 - t), (1 - t), (1 + t), -(1 + t)])
            dN_dt = 0.25 * np.array([-(1 - s), -(1 + s), (1 + s), (1 - s)])
            dN_dx = dN_ds * 2.0 / hx
            dN_dy = dN_dt * 2.0 / hy
            B = np.zeros((3, 8))
            B[0, 0::2] = dN_dx
            B[1, 1::2] = dN_dy
            B[2, 0::2] = dN_dy
            B[2, 1::2] = dN_dx
            Ke += B.T @ D @ B * (hx * hy / 4.0)
    return Ke


def element_mass(hx: float, hy: float) -> np.ndarray:
    """8x8 consistent mass matrix (unit density) of a Q4 element, both components."""
    m = np.array([[4.0, 2.0, 1.0, 2.0],
                  [2.0, 4.0, 2.0, 1.0],
                  [1.0, 2.0, 4.0, 2.0],
                  [2.0, 1.0, 2.0, 4.0]]) * (hx * hy / 36.0)
    return np.kron(m, np.eye(2))


class ElasticModel:
    """Grid, material and boundary conditions with cached assembly data.

    Parameters
    ----------
    grid, material, bc
        Problem definition.
    passive : array of int, optional
        Elements outside the physical domain (masked grids).  They keep the
        void stiffness and are excluded from volume and filtering.
    tol : float
        Relative residual tolerance of the conjugate-gradient solver.
    solver : {"cg", "direct"}
        ``"direct"`` uses a sparse LU factorisation instead of CG.
    """

    def __init__(self, grid: StructuredGrid, material: MaterialModel, bc: BoundaryConditions,
                 passive=None, tol: float = 1e-8, solver: str = "cg", max_iter=None):
        self.grid = grid
        self.material = material
        self.bc = bc
        self.tol = tol
        if solver not in ("cg", "direct"):
            raise ValueError(f"unknown solver {solver!r}")
        self.solver = solver
        self.max_iter = max_iter
        mask = np.ones(grid.n_elements, dtype=bool)
        if passive is not None:
            mask[np.asarray(passive, dtype=np.int64)] = False
        self.active = mask
        self.K0 = element_stiffness(grid.hx, grid.hy, material.nu, 1.0)
        self.M0 = element_mass(grid.hx, grid.hy)
        self.edofs = grid.element_dofs()
        self._iK = np.repeat(self.edofs, 8, axis=1).ravel()
        self._jK = np.tile(self.edofs, (1, 8)).ravel()
        fixed = bc.dirichlet_dofs()
        if fixed.max(initial=-1) >= grid.n_dofs:
            raise ValueError("Dirichlet node index outside the grid")
        self.fixed = fixed
        self.free = np.setdiff1d(np.arange(grid.n_dofs), fixed)
        self.load_matrix = self._build_load_matrix()

    # -- assembly -------------------------------------------------------
    def _build_load_matrix(self) -> np.ndarray:
        return load_matrix(self.grid, self.bc)

    def _check_density(self, h):
        h = np.asarray(h, dtype=float)
        if h.shape != (self.grid.n_elements,):
            raise ValueError(f"density has shape {h.shape}, expected ({self.grid.n_elements},)")
        return h

    def _modulus(self, modulus):
        if modulus is None:
            return np.full(self.grid.n_elements, self.material.E)
        modulus = np.broadcast_to(np.asarray(modulus, dtype=float), (self.grid.n_elements,))
        return modulus

    def stiffness_scale(self, h, modulus=None) -> np.ndarray:
        """Per-element factor ``E_e * (eta + (1 - eta) h_e^p)``; passive elements get ``E_e * eta``."""
        h = self._check_density(h)
        s = self.material.interpolation(h)
        s[~self.active] = self.material.eta
        return self._modulus(modulus) * s

    def stiffness_scale_derivative(self, h, modulus=None) -> np.ndarray:
        h = self._check_density(h)
        ds = self.material.interpolation_derivative(h)
        ds[~self.active] = 0.0
        return self._modulus(modulus) * ds

    def assemble(self, h, modulus=None) -> sp.csr_matrix:
        coef = self.stiffness_scale(h, modulus)
        vals = (self.K0.ravel()[None, :] * coef[:, None]).ravel()
        n = self.grid.n_dofs
        K = sp.coo_matrix((vals, (self._iK, self._jK)), shape=(n, n)).tocsr()
        return 0.5 * (K + K.T)

    def assemble_mass(self, chi) -> sp.csr_matrix:
        chi = np.asarray(chi, dtype=float)
        vals = (self.M0.ravel()[None, :] * chi[:, None]).ravel()
        n = self.grid.n_dofs
        return sp.coo_matrix((vals, (self._iK, self._jK)), shape=(n, n)).tocsr()

    # -- solves ---------------------------------------------------------
    def solve(self, K: sp.csr_matrix, rhs: np.ndarray, x0=None):
        """Solve ``K u = rhs`` with Dirichlet dofs eliminated.

        ``rhs`` may be a vector or an ``(n_dofs, m)`` block; returns the full
        solution (zeros on fixed dofs), the largest iteration count and the
        largest relative residual over the columns.
        """
        rhs = np.asarray(rhs, dtype=float)
        single = rhs.ndim == 1
        R = rhs[:, None] if single else rhs
        free = self.free
        Kff = K[free][:, free].tocsr()
        U = np.zeros_like(R)
        iters, worst = 0, 0.0
        if self.solver == "direct":
            lu = spla.splu(Kff.tocsc())
            U[free] = lu.solve(R[free])
        else:
            diag = Kff.diagonal()
            if np.any(diag <= 0):
                raise SolverError("stiffness matrix has non-positive diagonal after elimination")
            M = sp.diags(1.0 / diag)
            max_iter = self.max_iter or 10 * len(free)
            for c in range(R.shape[1]):
                b = R[free, c]
                bnorm = np.linalg.norm(b)
                if bnorm == 0.0:
                    continue
                count = [0]

                def _tick(_):
                    count[0] += 1

                guess = None
                if x0 is not None:
                    guess = np.asarray(x0, dtype=float).reshape(len(R), -1)[free, c]
                x, info = spla.cg(Kff, b, x0=guess, rtol=self.tol, atol=0.0, maxiter=max_iter, M=M, callback=_tick)
                res = np.linalg.norm(Kff @ x - b) / bnorm
                if info != 0 and res > self.tol:
                    raise SolverError(
                        f"CG did not converge: {count[0]} iterations, relative residual {res:.3e}",
                        iterations=count[0], residual=res)
                U[free, c] = x
                iters = max(iters, count[0])
                worst = max(worst, res)
        if self.solver == "direct":
            for c in range(R.shape[1]):
                bnorm = np.linalg.norm(R[free, c])
                if bnorm > 0:
                    worst = max(worst, np.linalg.norm(Kff @ U[free, c] - R[free, c]) / bnorm)
        return (U[:, 0] if single else U), iters, worst

    def element_energy(self, u, v=None) -> np.ndarray:
        """Per-element ``u_e^T K0 v_e`` (unit modulus, full material)."""
        ue = np.asarray(u)[self.edofs]
        ve = ue if v is None else np.asarray(v)[self.edofs]
        return np.einsum("ei,ij,ej->e", ue, self.K0, ve)

    def load_vector(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float).ravel()
        if xi.shape != (self.bc.n_load_params,):
            raise ValueError(f"load parameter has length {xi.size}, expected {self.bc.n_load_params}")
        return self.load_matrix @ xi

    def solve_displacement(self, h, xi, modulus=None, x0=None) -> ElasticState:
        h = self._check_density(h)
        f = self.load_vector(xi)
        K = self.assemble(h, modulus)
        u, iters, res = self.solve(K, f, x0=x0)
        return ElasticState(u=u, energy=self.element_energy(u), xi=np.array(xi, dtype=float).ravel(),
                            iterations=iters, residual=res, h=h.copy())

    # -- functionals ----------------------------------------------------
    def compliance(self, state: ElasticState, xi) -> float:
        """Work of the tractions, ``int_{Gamma_N} g . u ds`` by exact edge quadrature."""
        xi = np.asarray(xi, dtype=float).ravel()
        if state.xi is not None and not np.array_equal(state.xi, xi):
            raise ValueError("state was solved for a different load; re-solve before evaluating compliance")
        return float(self.load_vector(xi) @ state.u)

    def compliance_sensitivity(self, h, state: ElasticState, modulus=None) -> np.ndarray:
        return -self.stiffness_scale_derivative(h, modulus) * state.energy

    def adjoint_sensitivity(self, h, state: ElasticState, rhs, modulus=None) -> np.ndarray:
        """Solve ``K p = rhs`` and return ``dscale_e * u_e^T K0 p_e``.

        This is the derivative of any functional ``J(u)`` whose gradient in
        ``u`` is ``-rhs``.  The adjoint is stored on ``state``.
        """
        K = self.assemble(h, modulus)
        p, _, _ = self.solve(K, rhs)
        state.adjoint = p
        return self.stiffness_scale_derivative(h, modulus) * self.element_energy(state.u, p)

    def misfit(self, u, u_target, chi) -> float:
        d = np.asarray(u) - np.asarray(u_target)
        return float(d @ (self.assemble_mass(chi) @ d))

    def misfit_adjoint_rhs(self, u, u_target, chi) -> np.ndarray:
        d = np.asarray(u) - np.asarray(u_target)
        return -2.0 * (self.assemble_mass(chi) @ d)

    def volume(self, h) -> float:
        h = self._check_density(h)
        return float(np.sum(h[self.active]) * self.grid.element_area)

    def volume_sensitivity(self) -> np.ndarray:
        return np.where(self.active, self.grid.element_area, 0.0)

    @property
    def domain_volume(self) -> float:
        return float(np.count_nonzero(self.active) * self.grid.element_area)


class DensityFilter:
    """Linear cone filter ``h~ = W h / (W 1)`` with radius in element widths.

    Passive elements are decoupled: they neither contribute to nor receive
    filtered density, and their filtered value is 0.
    """

    def __init__(self, grid: StructuredGrid, radius: float = 1.5, active=None):
        self.grid = grid
        self.radius = radius
        n = grid.n_elements
        active = np.ones(n, dtype=bool) if active is None else np.asarray(active, dtype=bool)
        self.active = active
        if radius <= 0:
            self.matrix = sp.diags(active.astype(float)).tocsr()
            return
        r_phys = radius * min(grid.hx, grid.hy)
        c = grid.element_centroids()
        reach_x = int(np.ceil(r_phys / grid.hx))
        reach_y = int(np.ceil(r_phys / grid.hy))
        rows, cols, vals = [], [], []
        ix = np.arange(n) % grid.nx
        jy = np.arange(n) // grid.nx
        for di in range(-reach_x, reach_x + 1):
            for dj in range(-reach_y, reach_y + 1):
                i2, j2 = ix + di, jy + dj
                ok = (i2 >= 0) & (i2 < grid.nx) & (j2 >= 0) & (j2 < grid.ny)
                e = np.flatnonzero(ok)
                f = j2[ok] * grid.nx + i2[ok]
                w = r_phys - np.hypot(di * grid.hx, dj * grid.hy)
                if w <= 0:
                    continue
                keep = active[e] & active[f]
                rows.append(e[keep])
                cols.append(f[keep])
                vals.append(np.full(keep.sum(), w))
        W = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tocsr()
        rowsum = np.asarray(W.sum(axis=1)).ravel()
        inv = np.divide(1.0, rowsum, out=np.zeros_like(rowsum), where=rowsum > 0)
        self.matrix = (sp.diags(inv) @ W).tocsr()

    def apply(self, h) -> np.ndarray:
        return self.matrix @ np.asarray(h, dtype=float)

    def backprop(self, grad) -> np.ndarray:
        """Chain rule: gradient in filtered densities -> gradient in raw densities."""
        return self.matrix.T @ np.asarray(grad, dtype=float)


# -- module-level operations ---------------------------------------------------

def load_matrix(grid: StructuredGrid, bc: BoundaryConditions) -> np.ndarray:
    """``(n_dofs, 2 * n_patches)`` map from load parameters to consistent nodal forces.

    A constant traction on a straight edge of length ``L`` puts ``L / 2`` of
    it on each end node, which integrates ``g . u`` exactly for bilinear ``u``.
    """
    xy = grid.node_coordinates()
    B = np.zeros((grid.n_dofs, bc.n_load_params))
    for k, patch in enumerate(bc.patches):
        a, b = patch.edges[:, 0], patch.edges[:, 1]
        if max(a.max(), b.max()) >= grid.n_nodes:
            raise ValueError(f"patch {patch.name!r} references a node outside the grid")
        length = np.linalg.norm(xy[a] - xy[b], axis=1)
        for c in range(2):
            np.add.at(B[:, 2 * k + c], 2 * a + c, 0.5 * length)
            np.add.at(B[:, 2 * k + c], 2 * b + c, 0.5 * length)
    return B


def assemble_stiffness(grid: StructuredGrid, h, mat: MaterialModel, modulus=None) -> sp.csr_matrix:
    """Global stiffness (no boundary conditions) for density ``h``."""
    h = np.asarray(h, dtype=float)
    if h.shape != (grid.n_elements,):
        raise ValueError(f"density has shape {h.shape}, expected ({grid.n_elements},)")
    K0 = element_stiffness(grid.hx, grid.hy, mat.nu, 1.0)
    edofs = grid.element_dofs()
    coef = np.broadcast_to(np.asarray(mat.E if modulus is None else modulus, dtype=float), h.shape)
    coef = coef * mat.interpolation(h)
    vals = (K0.ravel()[None, :] * coef[:, None]).ravel()
    n = grid.n_dofs
    K = sp.coo_matrix((vals, (np.repeat(edofs, 8, axis=1).ravel(), np.tile(edofs, (1, 8)).ravel())),
                      shape=(n, n)).tocsr()
    return 0.5 * (K + K.T)


def solve_displacement(grid, h, mat, bc, xi, modulus=None, tol=1e-8, solver="cg") -> ElasticState:
    return ElasticModel(grid, mat, bc, tol=tol, solver=solver).solve_displacement(h, xi, modulus)


def compliance(grid, bc, state: ElasticState, xi) -> float:
    xi = np.asarray(xi, dtype=float).ravel()
    if state.xi is not None and not np.array_equal(state.xi, xi):
        raise ValueError("state was solved for a different load; re-solve before evaluating compliance")
    return float(load_matrix(grid, bc) @ xi @ state.u)


def compliance_sensitivity(grid, h, mat, state: ElasticState, modulus=None) -> np.ndarray:
    """``-p (1 - eta) h_e^{p-1} E_e * (u_e^T K0 u_e)`` per element."""
    h = np.asarray(h, dtype=float)
    E = np.broadcast_to(np.asarray(mat.E if modulus is None else modulus, dtype=float), h.shape)
    return -E * mat.interpolation_derivative(h) * state.energy


def target_displacement_objective(grid, h, mat, bc, xi, u_target, chi, modulus=None,
                                  tol=1e-8, solver="cg") -> float:
    model = ElasticModel(grid, mat, bc, tol=tol, solver=solver)
    state = model.solve_displacement(h, xi, modulus)
    return model.misfit(state.u, u_target, chi)


def target_displacement_sensitivity(grid, h, mat, bc, xi, u_target, chi, modulus=None,
                                    tol=1e-8, solver="cg") -> np.ndarray:
    model = ElasticModel(grid, mat, bc, tol=tol, solver=solver)
    state = model.solve_displacement(h, xi, modulus)
    rhs = model.misfit_adjoint_rhs(state.u, u_target, chi)
    return model.adjoint_sensitivity(h, state, rhs, modulus)


def volume(grid: StructuredGrid, h) -> float:
    return float(np.sum(h) * grid.element_area)


def volume_sensitivity(grid: StructuredGrid) -> np.ndarray:
    return np.full(grid.n_elements, grid.element_area)
