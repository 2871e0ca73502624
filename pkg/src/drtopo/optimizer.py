"""Stochastic projected null-space descent on the augmented variable.

The design block ``h`` moves along
``-s_J xi_J - a_C xi_C`` with

* ``xi_J = grad J - C^T (C C^T)^-1 C grad J`` (objective projected on the
  tangent space of the active constraints),
* ``xi_C = C^T (C C^T)^-1 g`` (Gauss-Newton restoration of ``g = 0``),

where the rows of ``C`` are the design gradients of the equality
constraints and of the active inequality constraints, restricted to the
free elements (those not pinned at a bound by the step).  The auxiliary
blocks ``lam, tau, S, alpha`` take plain projected gradient steps on the
functionals they appear in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

LAMBDA_MIN = 1e-6
AUX_BLOCKS = ("lam", "tau", "S", "alpha")


def project_block(block, kind: str, lambda_min: float = LAMBDA_MIN):
    """Euclidean projection of one variable block onto its constraint set.

    ``h`` -> box ``[0, 1]``; ``lam`` -> ``[lambda_min, inf)``; ``tau`` ->
    unit ball (radial scaling); ``S`` -> PSD cone (eigenvalue clipping);
    ``alpha`` is unconstrained.
    """
    if kind == "h":
        return np.clip(block, 0.0, 1.0)
    if kind == "lam":
        return max(float(block), lambda_min)
    if kind == "tau":
        t = np.asarray(block, dtype=float)
        n = np.linalg.norm(t)
        return t / n if n > 1.0 else t.copy()
    if kind == "S":
        S = np.asarray(block, dtype=float)
        S = 0.5 * (S + S.T)
        w, V = np.linalg.eigh(S)
        return (V * np.maximum(w, 0.0)) @ V.T
    if kind == "alpha":
        return float(block)
    raise ValueError(f"unknown block kind {kind!r}")


@dataclass
class Constraint:
    """Value and per-block gradients of one constraint ``g = 0`` or ``g <= 0``."""

    value: float
    grads: Dict[str, np.ndarray]
    name: str = "constraint"


@dataclass
class Evaluation:
    objective: float
    grads: Dict[str, np.ndarray]
    equalities: List[Constraint] = field(default_factory=list)
    inequalities: List[Constraint] = field(default_factory=list)
    diagnostics: Dict[str, float] = field(default_factory=dict)


@dataclass
class OptimizationProblem:
    """Augmented problem handed to :func:`run`.

    ``evaluate(blocks, iteration)`` returns an :class:`Evaluation` computed on
    that iteration's sample batch.  ``fixed`` marks design entries held at
    their initial value (passive elements).
    """

    evaluate: Callable[[Dict[str, object], int], Evaluation]
    initial: Dict[str, object]
    fixed: Optional[np.ndarray] = None
    lambda_min: float = LAMBDA_MIN
    volume: Optional[Callable[[np.ndarray], float]] = None

    def __post_init__(self):
        if "h" not in self.initial:
            raise ValueError("the design block 'h' is required")
        n = np.size(self.initial["h"])
        if self.fixed is None:
            self.fixed = np.zeros(n, dtype=bool)
        if self.fixed.shape != (n,):
            raise ValueError("fixed mask must match the design length")


@dataclass
class OptimizerSettings:
    iterations: int = 150
    step: float = 0.05
    aux_steps: Dict[str, float] = field(default_factory=lambda: {"lam": 0.05, "tau": 0.05, "S": 0.05, "alpha": 0.05})
    t0: float = 50.0
    range_step: float = 0.5
    active_tol: float = 1e-3
    max_restore: float = 0.1

    def decay(self, t: int) -> float:
        return 1.0 / math.sqrt(1.0 + t / self.t0)


class OptimizationAborted(RuntimeError):
    """Raised when an evaluation fails; carries the log collected so far."""

    def __init__(self, message, log):
        super().__init__(message)
        self.log = log


@dataclass
class ConvergenceLog:
    rows: List[Dict[str, float]] = field(default_factory=list)

    BASE = ("iter", "objective", "volume", "lambda", "alpha", "step_norm")

    def append(self, row: Dict[str, float]) -> None:
        self.rows.append(row)

    def columns(self) -> List[str]:
        cols = list(self.BASE)
        for row in self.rows:
            for key in row:
                if key not in cols:
                    cols.append(key)
        return cols

    def column(self, name: str) -> np.ndarray:
        return np.array([row.get(name, np.nan) for row in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)


@dataclass
class DescentState:
    blocks: Dict[str, object]
    iteration: int = 0
    scales: Dict[str, float] = field(default_factory=dict)
    last_step: float = 0.0

    def copy(self) -> "DescentState":
        return DescentState({k: (np.array(v, dtype=float) if isinstance(v, np.ndarray) else v)
                             for k, v in self.blocks.items()},
                            self.iteration, dict(self.scales), self.last_step)


def _solve_rows(C, rhs):
    return np.linalg.lstsq(C @ C.T, rhs, rcond=None)[0]


def _design_update(h, grad, rows, values, free, scale, range_step, max_restore=np.inf):
    """Null-space plus range-space step restricted to ``free``; returns (delta, xi_J).

    Rows whose norm is negligible next to the objective gradient carry no
    usable direction and are dropped; the restoration is capped entrywise at
    ``max_restore``.
    """
    delta = np.zeros_like(h)
    xi_J = np.zeros_like(h)
    g = grad[free]
    if rows:
        C = np.array([r[free] for r in rows])
        v = np.asarray(values, dtype=float)
        norms = np.linalg.norm(C, axis=1)
        nz = norms > 1e-10 * max(np.linalg.norm(g), norms.max(), 1e-300)
        C, v = C[nz], v[nz]
    else:
        C = np.zeros((0, g.size))
        v = np.zeros(0)
    if len(C):
        proj = g - C.T @ _solve_rows(C, C @ g)
        restore = range_step * (C.T @ _solve_rows(C, v))
        peak = np.max(np.abs(restore)) if restore.size else 0.0
        if peak > max_restore:
            restore *= max_restore / peak
    else:
        proj, restore = g, np.zeros_like(g)
    xi_J[free] = proj
    delta[free] = -scale * proj - restore
    return delta, xi_J


def null_space_step(state: DescentState, problem: OptimizationProblem, settings: OptimizerSettings,
                    evaluation: Optional[Evaluation] = None) -> DescentState:
    """One descent step; evaluates the problem at the current iterate when needed."""
    t = state.iteration
    ev = problem.evaluate(state.blocks, t) if evaluation is None else evaluation
    new = state.copy()
    decay = settings.decay(t)
    h = np.asarray(state.blocks["h"], dtype=float)

    rows = [c.grads["h"] for c in ev.equalities]
    values = [c.value for c in ev.equalities]
    for c in ev.inequalities:
        if c.value > -settings.active_tol * max(1.0, abs(c.value)):
            rows.append(c.grads.get("h", np.zeros_like(h)))
            values.append(c.value)

    grad = np.asarray(ev.grads.get("h", np.zeros_like(h)), dtype=float)
    free = ~problem.fixed
    if "h" not in state.scales:
        _, xi0 = _design_update(h, grad, rows, values, free, 0.0, 0.0)
        m = np.max(np.abs(xi0)) if xi0.size else 0.0
        new.scales["h"] = settings.step / m if m > 0 else settings.step
    scale = new.scales["h"] * decay
    for _ in range(8):
        delta, _ = _design_update(h, grad, rows, values, free, scale, settings.range_step, settings.max_restore)
        pinned = free & (((h <= 0.0) & (delta < 0)) | ((h >= 1.0) & (delta > 0)))
        if not pinned.any():
            break
        free = free & ~pinned
    new_h = project_block(h + delta, "h")
    new_h[problem.fixed] = h[problem.fixed]
    new.blocks["h"] = new_h
    step_sq = float(np.sum((new_h - h) ** 2))

    for name in AUX_BLOCKS:
        if name not in state.blocks:
            continue
        g = np.asarray(ev.grads.get(name, 0.0), dtype=float)
        for c in ev.inequalities:
            if name in c.grads:
                g = g + np.asarray(c.grads[name], dtype=float)
        if name not in state.scales:
            m = float(np.max(np.abs(g))) if np.size(g) else 0.0
            base = settings.aux_steps.get(name, settings.step)
            size = max(1.0, float(np.max(np.abs(state.blocks[name]))))
            new.scales[name] = base * size / max(m, 1.0)
        old = np.asarray(state.blocks[name], dtype=float)
        upd = project_block(old - new.scales[name] * decay * g, name, problem.lambda_min)
        step_sq += float(np.sum((np.asarray(upd) - old) ** 2))
        new.blocks[name] = upd
    new.iteration = t + 1
    new.last_step = math.sqrt(step_sq)
    return new


def run(problem: OptimizationProblem, settings: OptimizerSettings, callback=None):
    """Iterate ``evaluate -> step -> project -> log``; returns ``(state, log)``.

    The log row of iteration ``t`` reports the quantities evaluated at the
    iterate entering that iteration and the norm of the step taken from it.
    """
    if settings.iterations < 1:
        raise ValueError("iterations must be >= 1")
    blocks = {}
    for k, v in problem.initial.items():
        blocks[k] = np.array(v, dtype=float) if np.ndim(v) else float(v)
    blocks["h"] = project_block(blocks["h"], "h")
    state = DescentState(blocks)
    log = ConvergenceLog()
    for t in range(settings.iterations):
        try:
            ev = problem.evaluate(state.blocks, t)
        except Exception as err:
            raise OptimizationAborted(f"evaluation failed at iteration {t}: {err}", log) from err
        nxt = null_space_step(state, problem, settings, ev)
        row = {
            "iter": t,
            "objective": ev.objective,
            "volume": problem.volume(state.blocks["h"]) if problem.volume else float("nan"),
            "lambda": float(state.blocks.get("lam", float("nan"))),
            "alpha": float(state.blocks.get("alpha", float("nan"))),
            "step_norm": nxt.last_step,
        }
        for i, c in enumerate(ev.inequalities):
            row[c.name] = c.value
        row.update(ev.diagnostics)
        log.append(row)
        if callback is not None:
            callback(t, state, ev)
        state = nxt
    return state, log
