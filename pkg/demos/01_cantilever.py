"""Deterministic cantilever: the baseline every robust design is compared with.

Run with ``python demos/01_cantilever.py``.  Outputs land in
``demo_out/cantilever``; open ``density.pgm`` in any image viewer.
"""
# %%
# A 2x1 beam clamped on the left and loaded downward-left at the middle of
# the right edge.  The configuration format is the one read by
# ``python -m drtopo optimize``.
import numpy as np

from drtopo.cli_io import optimize, parse_config

cfg = parse_config("""
[problem]
preset = cantilever-2x1
nx = 60
ny = 30

[formulation]
kind = deterministic

[optimizer]
iterations = 150

[output]
directory = demo_out/cantilever
""")

# %%
# The optimiser starts from a uniform density at the target volume.  The
# log holds one row per iteration.
state, log, setup = optimize(cfg)
obj = log.column("objective")
vol = log.column("volume")
for t in (0, 10, 50, 100, len(obj) - 1):
    print(f"iter {t:4d}  compliance {obj[t]:8.4f}  volume {vol[t]:.4f}")

# %%
# Out-of-sample check: the optimised beam is good for the load it was
# designed for and much worse for a vertical one.
h = state.blocks["h"]
loads = np.array([[-1.0, 0.0], [0.0, -1.0], [-0.7, -0.7]])
values, _ = setup.problem.cost.evaluate_batch(h, loads)
for xi, c in zip(loads, values):
    print(f"load {xi}  compliance {c:.4f}")
