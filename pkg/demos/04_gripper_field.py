"""Random stiffness fields and the gripper mechanism.

The Young's modulus is a Karhunen-Loeve expansion of an exponential
covariance pushed through a Gaussian-to-uniform map, so each element's
modulus lies in [0.1, 1.9].  The gripper jaws should close inward when the
input is pushed, whatever the field looks like.
"""
# %%
import numpy as np

from drtopo.cli_io import optimize, parse_config
from drtopo.grid_fem import StructuredGrid
from drtopo.kl_field import CovarianceSpec, ModulusTransform, build_kl_basis, realize_modulus

grid = StructuredGrid(30, 30)
basis = build_kl_basis(grid, CovarianceSpec(100.0, 2e-2), 10)
print("leading eigenvalues:", np.array2string(basis.eigenvalues[:5], precision=4))
print("orthonormality defect:", np.abs(basis.gram() - np.eye(basis.k)).max())

# %%
E = realize_modulus(basis, ModulusTransform(), np.random.default_rng(0).normal(size=(500, 10)))
print(f"modulus range over 500 fields: [{E.min():.3f}, {E.max():.3f}]")

# %%
# A short Wasserstein-robust run on a coarse grid.
cfg = parse_config("""
[problem]
preset = gripper-1x1
nx = 24
ny = 24
kl_modes = 6

[formulation]
kind = wasserstein
m = 0.5
n_inner = 6

[optimizer]
iterations = 40

[output]
directory = demo_out/gripper
""")
state, log, _ = optimize(cfg)
print("dual objective:", np.array2string(log.column("objective")[::10], precision=5))
print("sample mean   :", np.array2string(log.column("mean_cost")[::10], precision=5))
