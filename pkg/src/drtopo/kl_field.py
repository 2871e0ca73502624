"""Karhunen-Loeve expansion of a random Young's modulus field.

The covariance operator ``T phi(x) = int Cov(x, y) phi(y) dy`` is discretised
by Nystrom quadrature at element centroids with element-area weights ``w``.
The symmetric matrix ``W^1/2 K W^1/2`` is diagonalised densely and its
eigenvectors are mapped back to ``phi = W^-1/2 psi``, so modes are
orthonormal in the area-weighted inner product ``sum_e w_e phi_i phi_j``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import erfc

from .grid_fem import StructuredGrid


@dataclass(frozen=True)
class CovarianceSpec:
    """Exponential kernel ``amplitude * exp(-|x - y| / l_cor)``."""

    amplitude: float = 100.0
    l_cor: float = 2e-2

    def __post_init__(self):
        if self.amplitude <= 0 or self.l_cor <= 0:
            raise ValueError("covariance amplitude and correlation length must be positive")

    def matrix(self, x, y=None) -> np.ndarray:
        y = x if y is None else y
        return self.amplitude * np.exp(-cdist(x, y) / self.l_cor)


@dataclass(frozen=True)
class KLBasis:
    """Leading eigenpairs; ``modes[i]`` holds one value per element."""

    eigenvalues: np.ndarray
    modes: np.ndarray
    weights: np.ndarray
    grid_shape: tuple = ()
    spec: CovarianceSpec = CovarianceSpec()

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    def gram(self) -> np.ndarray:
        """Pairwise weighted inner products of the modes (identity up to rounding)."""
        return (self.modes * self.weights) @ self.modes.T

    def kernel_reconstruction(self) -> np.ndarray:
        return (self.modes.T * self.eigenvalues) @ self.modes

    def marginal_std(self) -> np.ndarray:
        """Pointwise standard deviation of ``sum_i sqrt(lambda_i) E_i xi_i`` for standard normal ``xi``."""
        return np.sqrt(self.eigenvalues @ self.modes ** 2)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, eigenvalues=self.eigenvalues, modes=self.modes, weights=self.weights,
                     grid_shape=np.asarray(self.grid_shape, dtype=np.int64),
                     spec=np.array([self.spec.amplitude, self.spec.l_cor]))

    @classmethod
    def load(cls, path) -> "KLBasis":
        with np.load(Path(path)) as data:
            amp, lc = data["spec"]
            return cls(data["eigenvalues"], data["modes"], data["weights"],
                       tuple(int(v) for v in data["grid_shape"]), CovarianceSpec(float(amp), float(lc)))


@dataclass(frozen=True)
class ModulusTransform:
    """Map ``G = F^-1 o Phi`` from the Gaussian field to a uniform law on ``[lower, upper]``.

    With ``standardize`` the field is centred at the mean value 1 and scaled
    by its pointwise standard deviation before ``Phi`` is applied, so each
    element's modulus is exactly uniform on ``[lower, upper]``.
    """

    lower: float = 0.1
    upper: float = 1.9
    standardize: bool = True

    def __post_init__(self):
        if not 0 < self.lower < self.upper:
            raise ValueError("need 0 < lower < upper")

    def __call__(self, field, std=None) -> np.ndarray:
        z = np.asarray(field, dtype=float)
        if self.standardize:
            s = np.ones_like(z) if std is None else np.where(std > 0, std, 1.0)
            z = (z - 1.0) / s
        return self.lower + (self.upper - self.lower) * normal_cdf(z)


def normal_cdf(z):
    """Standard normal CDF through ``erfc`` (accurate in both tails)."""
    return 0.5 * erfc(-np.asarray(z, dtype=float) / np.sqrt(2.0))


def build_kl_basis(grid: StructuredGrid, spec: CovarianceSpec, k: int = 10) -> KLBasis:
    """Top ``k`` Karhunen-Loeve pairs of the kernel on ``grid``."""
    n = grid.n_elements
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    x = grid.element_centroids()
    w = np.full(n, grid.element_area)
    sw = np.sqrt(w)
    B = sw[:, None] * spec.matrix(x) * sw[None, :]
    vals, vecs = np.linalg.eigh(B)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    positive = vals > vals[0] * 1e-13
    if not np.all(positive[:k]):
        kept = int(np.sum(positive[:k]))
        warnings.warn(f"only {kept} of {k} requested modes have a positive eigenvalue; truncating",
                      RuntimeWarning, stacklevel=2)
        k = kept
    modes = (vecs[:, :k] / sw[:, None]).T
    # fix the sign so each mode has a positive weighted mean (or first nonzero entry)
    for i in range(k):
        ref = modes[i] @ w
        if abs(ref) < 1e-12:
            ref = modes[i][np.argmax(np.abs(modes[i]) > 1e-12)]
        if ref < 0:
            modes[i] = -modes[i]
    return KLBasis(vals[:k].copy(), modes, w, (grid.nx, grid.ny), spec)


def gaussian_field(basis: KLBasis, xi) -> np.ndarray:
    """``E0 + sum_i sqrt(lambda_i) E_i xi_i`` with ``E0 = 1``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != basis.k:
        raise ValueError(f"xi has {xi.shape[-1]} entries, basis has {basis.k} modes")
    return 1.0 + (xi * np.sqrt(basis.eigenvalues)) @ basis.modes


def realize_modulus(basis: KLBasis, transform: ModulusTransform, xi) -> np.ndarray:
    """Per-element Young's modulus ``G(E~(x, xi))``; ``xi`` may be a batch ``(n, k)``."""
    return transform(gaussian_field(basis, xi), basis.marginal_std())

