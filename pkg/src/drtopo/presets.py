"""Named test cases: geometry, supports, load patches and nominal laws.

Non-rectangular domains are masked structured grids; masked elements are
passive (void stiffness, density pinned at 0, no filter coupling, no
volume).  Patch extents are given as a fraction of the relevant side.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .grid_fem import BoundaryConditions, LoadPatch, StructuredGrid


@dataclass
class Geometry:
    grid: StructuredGrid
    bc: BoundaryConditions
    passive: np.ndarray
    nominal: np.ndarray
    weights: Optional[np.ndarray] = None
    extra: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class ProblemPreset:
    """Defaults of one named case; :meth:`build` realises it on a grid."""

    name: str
    lx: float
    ly: float
    nx: int
    ny: int
    volume_target: Optional[float]
    formulation: str
    builder: Callable = field(repr=False, compare=False)
    defaults: tuple = ()

    def build(self, nx: int, ny: int, patch_fraction: float = 0.1) -> Geometry:
        return self.builder(StructuredGrid(nx, ny, self.lx, self.ly), patch_fraction)

    def default(self, key, fallback=None):
        return dict(self.defaults).get(key, fallback)


def _edges(fetch, lo, hi, center):
    e = fetch(lo, hi)
    if len(e):
        return e
    # patch narrower than one element: take the edge nearest to its centre
    width = hi - lo
    while not len(e):
        width *= 2
        e = fetch(center - width / 2, center + width / 2)
    return e


def _cantilever(grid: StructuredGrid, frac: float) -> Geometry:
    clamp = grid.nodes_where(lambda x, y: np.isclose(x, 0.0))
    half = 0.5 * frac * grid.ly
    c = 0.5 * grid.ly
    edges = _edges(lambda a, b: grid.vertical_edges(grid.lx, a, b), c - half, c + half, c)
    bc = BoundaryConditions(clamp, [LoadPatch("tip", edges)])
    return Geometry(grid, bc, np.zeros(0, dtype=np.int64), np.array([[-1.0, 0.0]]))


def _mast(grid: StructuredGrid, frac: float) -> Geometry:
    hx, hy = grid.hx, grid.hy
    arm_y = grid.ly * 2.0 / 3.0
    j_arm = int(round(arm_y / hy))
    trunk = (1.0 / 3.0 * grid.lx, 2.0 / 3.0 * grid.lx)
    cx = grid.element_centroids()
    in_trunk = (cx[:, 0] >= trunk[0]) & (cx[:, 0] <= trunk[1])
    active = in_trunk | (cx[:, 1] > j_arm * hy)
    passive = np.flatnonzero(~active)
    cols = np.unique(np.flatnonzero(in_trunk) % grid.nx)
    x_left, x_right = cols.min() * hx, (cols.max() + 1) * hx
    clamp = grid.nodes_where(lambda x, y: np.isclose(y, 0.0) & (x >= x_left - 1e-12) & (x <= x_right + 1e-12))
    tip = frac * grid.lx
    y_side = arm_y / 2.0
    half = 0.5 * frac * grid.ly
    patches = [
        LoadPatch("arm_left", _edges(lambda a, b: grid.horizontal_edges(j_arm * hy, a, b), 0.0, tip, tip / 2)),
        LoadPatch("arm_right", _edges(lambda a, b: grid.horizontal_edges(j_arm * hy, a, b),
                                      grid.lx - tip, grid.lx, grid.lx - tip / 2)),
        LoadPatch("trunk_left", _edges(lambda a, b: grid.vertical_edges(x_left, a, b),
                                       y_side - half, y_side + half, y_side)),
        LoadPatch("trunk_right", _edges(lambda a, b: grid.vertical_edges(x_right, a, b),
                                        y_side - half, y_side + half, y_side)),
    ]
    bc = BoundaryConditions(clamp, patches)
    atoms = np.array([
        [0, -1, 0, -1, 0, 0, 0, 0],
        [0, -1, 0, -1, -1, 0, -1, 0],
        [0, -1, 0, -1, 1, 0, 1, 0],
    ], dtype=float)
    return Geometry(grid, bc, passive, atoms, np.array([0.5, 0.25, 0.25]))


def _lbeam(grid: StructuredGrid, frac: float) -> Geometry:
    corner = 0.4
    cx = grid.element_centroids()
    passive = np.flatnonzero((cx[:, 0] > corner * grid.lx) & (cx[:, 1] > corner * grid.ly))
    active = np.ones(grid.n_elements, dtype=bool)
    active[passive] = False
    cols = np.unique(np.flatnonzero(active & (cx[:, 1] > corner * grid.ly)) % grid.nx)
    x_leg = (cols.max() + 1) * grid.hx
    clamp = grid.nodes_where(lambda x, y: np.isclose(y, grid.ly) & (x <= x_leg + 1e-12))
    rows = np.unique(np.flatnonzero(active & (cx[:, 0] > corner * grid.lx)) // grid.nx)
    arm_top = (rows.max() + 1) * grid.hy
    c = arm_top / 2.0
    half = 0.5 * frac * grid.ly
    edges = _edges(lambda a, b: grid.vertical_edges(grid.lx, a, b), c - half, c + half, c)
    bc = BoundaryConditions(clamp, [LoadPatch("tip", edges)])
    return Geometry(grid, bc, passive, np.array([[-1.0, 0.0]]))


def _bridge(grid: StructuredGrid, frac: float) -> Geometry:
    clamp = grid.nodes_where(lambda x, y: np.isclose(y, 0.0))
    edges = grid.horizontal_edges(grid.ly, 0.0, grid.lx)
    bc = BoundaryConditions(clamp, [LoadPatch("deck", edges)])
    return Geometry(grid, bc, np.zeros(0, dtype=np.int64), np.array([[0.0, -1.0]]))


def _gripper(grid: StructuredGrid, frac: float) -> Geometry:
    corner = frac * grid.ly / 2.0
    clamp = grid.nodes_where(lambda x, y: np.isclose(x, 0.0) & ((y <= corner + 1e-12) | (y >= grid.ly - corner - 1e-12)))
    c = 0.5 * grid.ly
    half = 0.5 * frac * grid.ly
    edges = _edges(lambda a, b: grid.vertical_edges(0.0, a, b), c - half, c + half, c)
    bc = BoundaryConditions(clamp, [LoadPatch("input", edges)])
    chi = np.zeros(grid.n_elements)
    jaw = grid.elements_where(lambda x, y: (x >= grid.lx * (1 - 1.5 * frac)) & (np.abs(y - c) <= 2 * half))
    chi[jaw] = 1.0
    u_target = np.zeros(grid.n_dofs)
    jaw_nodes = np.unique(grid.element_nodes()[jaw])
    u_target[2 * jaw_nodes] = -1.0
    return Geometry(grid, bc, np.zeros(0, dtype=np.int64), np.zeros((1, 10)),
                    extra={"chi": chi, "u_target": u_target, "load": np.array([0.1, 0.0])})


PRESETS = {
    "cantilever-2x1": ProblemPreset("cantilever-2x1", 2.0, 1.0, 60, 30, 0.6, "deterministic", _cantilever,
                                    (("sigma2", 0.1), ("eps", 0.01))),
    "mast-T": ProblemPreset("mast-T", 2.0, 3.0, 40, 60, None, "mean", _mast,
                            (("sigma2", 0.1), ("eps", 0.01), ("volume_fraction", 0.3))),
    "lbeam-1x1": ProblemPreset("lbeam-1x1", 1.0, 1.0, 40, 40, 0.2, "moment", _lbeam,
                               (("sigma2", 1e-2), ("eps", 0.01))),
    "bridge-1x2": ProblemPreset("bridge-1x2", 1.0, 2.0, 30, 60, 0.245, "deterministic", _bridge,
                                (("sigma2", 1e-2), ("eps", 0.01), ("C_T", 40.0))),
    "gripper-1x1": ProblemPreset("gripper-1x1", 1.0, 1.0, 40, 40, None, "wasserstein", _gripper,
                                 (("sigma2", 0.1), ("eps", 0.01), ("k", 10), ("penalty", 1e-2))),
}


def get_preset(name: str) -> ProblemPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
