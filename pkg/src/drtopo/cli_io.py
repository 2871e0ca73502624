"""Run configuration, output writers and command-line entry points.

Configuration files are line oriented::

    [problem]
    preset = cantilever-2x1
    nx = 60

    [formulation]
    kind = wasserstein
    m = 1.0

Blank lines and lines starting with ``#`` are ignored.  Unknown sections or
keys, duplicates, and keys that the chosen formulation does not use are
errors reported with their line number.  Missing values are filled from the
preset, and :func:`serialize_config` writes the resolved configuration back
in a canonical form that parses to the same object.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .dro import CvarConfig, MomentConfig, WassersteinConfig
from .grid_fem import DensityFilter, ElasticModel, MaterialModel
from .kl_field import CovarianceSpec, KLBasis, ModulusTransform, build_kl_basis
from .optimizer import ConvergenceLog, OptimizationAborted, OptimizerSettings, run
from .presets import get_preset
from .problems import ComplianceCost, DesignProblem, Formulation, MisfitCost
from .uncertainty import (
    Empirical,
    ParameterSpace,
    ReferenceKernel,
    TruncatedGaussian,
    default_radius,
)


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based or None when not tied to a line."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


# -- configuration --------------------------------------------------------------------

@dataclass
class ProblemSection:
    preset: str = ""
    nx: Optional[int] = None
    ny: Optional[int] = None
    volume_target: Optional[float] = None
    filter_radius: float = 1.5
    patch_fraction: float = 0.1
    solver: str = "cg"
    tol: float = 1e-8
    kl_modes: Optional[int] = None
    kl_amplitude: Optional[float] = None
    kl_length: Optional[float] = None
    kl_basis_file: Optional[str] = None
    penalty_volume: Optional[float] = None
    penalty_compliance: Optional[float] = None


@dataclass
class MaterialSection:
    E: float = 1.0
    nu: float = 0.3
    eta: float = 1e-3
    p: float = 3.0


@dataclass
class FormulationSection:
    kind: str = ""
    frozen: bool = False
    m: Optional[float] = None
    eps: Optional[float] = None
    sigma2: Optional[float] = None
    n_inner: Optional[int] = None
    lambda_min: Optional[float] = None
    radius: Optional[float] = None
    m1: Optional[float] = None
    m2: Optional[float] = None
    n_samples: Optional[int] = None
    beta: Optional[float] = None
    C_T: Optional[float] = None
    gamma: Optional[float] = None


@dataclass
class OptimizerSection:
    iterations: int = 150
    step: float = 0.05
    step_lambda: float = 0.05
    step_tau: float = 0.05
    step_S: float = 0.05
    step_alpha: float = 0.05
    t0: float = 50.0
    range_step: float = 0.5
    active_tol: float = 1e-3
    max_restore: float = 0.1
    seed: int = 0


@dataclass
class OutputSection:
    directory: str = "out"
    vtk: bool = True
    pgm: bool = True


@dataclass
class RunConfig:
    problem: ProblemSection = field(default_factory=ProblemSection)
    material: MaterialSection = field(default_factory=MaterialSection)
    formulation: FormulationSection = field(default_factory=FormulationSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    output: OutputSection = field(default_factory=OutputSection)


_SECTIONS = ("problem", "material", "formulation", "optimizer", "output")
_INT_KEYS = {"nx", "ny", "kl_modes", "n_inner", "n_samples", "iterations", "seed"}
_STR_KEYS = {"preset", "solver", "kl_basis_file", "kind", "directory"}
_BOOL_KEYS = {"frozen", "vtk", "pgm"}

_FORMULATION_KEYS = {
    "deterministic": set(),
    "mean": {"sigma2", "n_samples", "radius"},
    "wasserstein": {"m", "eps", "sigma2", "n_inner", "lambda_min", "radius"},
    "moment": {"m1", "m2", "eps", "sigma2", "n_samples", "radius"},
    "cvar": {"beta", "C_T", "gamma", "sigma2", "n_samples", "radius"},
    "cvar_dro": {"beta", "C_T", "gamma", "m", "eps", "sigma2", "n_inner", "lambda_min", "radius"},
}
_REQUIRED = {"wasserstein": ("m",), "moment": ("m1", "m2"), "cvar": ("beta",), "cvar_dro": ("beta", "m")}
_GRIPPER_KEYS = ("kl_modes", "kl_amplitude", "kl_length", "kl_basis_file", "penalty_volume", "penalty_compliance")


def _convert(key, raw, line):
    try:
        if key in _STR_KEYS:
            if not raw:
                raise ValueError("empty value")
            return raw
        if key in _BOOL_KEYS:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if key in _INT_KEYS:
            return int(raw)
        return float(raw)
    except ValueError as err:
        kind = "string" if key in _STR_KEYS else "boolean" if key in _BOOL_KEYS else \
            "integer" if key in _INT_KEYS else "number"
        raise ConfigError(f"key {key!r} expects a {kind}, got {raw!r} ({err})", line) from None


def parse_config(text: str) -> RunConfig:
    """Parse and validate a configuration, filling preset defaults."""
    cfg = RunConfig()
    section = None
    seen = {}
    header_line = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", n)
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]", n)
            if section in header_line:
                raise ConfigError(f"duplicate section [{section}]", n)
            header_line[section] = n
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", n)
        if section is None:
            raise ConfigError("key outside of any section", n)
        key, value = (s.strip() for s in line.split("=", 1))
        target = getattr(cfg, section)
        if key not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown key {key!r} in section [{section}]", n)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[section, key]})", n)
        seen[section, key] = n
        setattr(target, key, _convert(key, value, n))
    _resolve(cfg, seen, header_line)
    return cfg


def _resolve(cfg: RunConfig, seen, header_line):
    p, f = cfg.problem, cfg.formulation
    if not p.preset:
        raise ConfigError("missing required key 'preset' in section [problem]", header_line.get("problem"))
    try:
        preset = get_preset(p.preset)
    except ValueError as err:
        raise ConfigError(str(err), seen.get(("problem", "preset"))) from None
    p.nx = preset.nx if p.nx is None else p.nx
    p.ny = preset.ny if p.ny is None else p.ny
    if p.nx < 1 or p.ny < 1:
        raise ConfigError("grid resolution must be positive", seen.get(("problem", "nx")))
    if p.solver not in ("cg", "direct"):
        raise ConfigError(f"solver must be 'cg' or 'direct', got {p.solver!r}", seen.get(("problem", "solver")))
    if p.volume_target is None and preset.volume_target is not None:
        p.volume_target = preset.volume_target
    gripper = p.preset == "gripper-1x1"
    for key in _GRIPPER_KEYS:
        if not gripper and getattr(p, key) is not None:
            raise ConfigError(f"key {key!r} only applies to the gripper-1x1 preset", seen.get(("problem", key)))
    if gripper:
        p.kl_modes = int(preset.default("k")) if p.kl_modes is None else p.kl_modes
        p.kl_amplitude = 100.0 if p.kl_amplitude is None else p.kl_amplitude
        p.kl_length = 2e-2 if p.kl_length is None else p.kl_length
        pen = preset.default("penalty")
        p.penalty_volume = pen if p.penalty_volume is None else p.penalty_volume
        p.penalty_compliance = pen if p.penalty_compliance is None else p.penalty_compliance

    f.kind = f.kind or preset.formulation
    if f.kind not in _FORMULATION_KEYS:
        raise ConfigError(f"unknown formulation {f.kind!r}; expected one of {sorted(_FORMULATION_KEYS)}",
                          seen.get(("formulation", "kind")))
    allowed = _FORMULATION_KEYS[f.kind]
    for fld in fields(f):
        if fld.name in ("kind", "frozen"):
            continue
        if getattr(f, fld.name) is not None and fld.name not in allowed:
            raise ConfigError(f"key {fld.name!r} is not used by formulation {f.kind!r}",
                              seen.get(("formulation", fld.name)))
    for key in _REQUIRED.get(f.kind, ()):
        if getattr(f, key) is None:
            raise ConfigError(f"formulation {f.kind!r} requires key {key!r}", header_line.get("formulation"))
    fill = {"eps": preset.default("eps"), "sigma2": preset.default("sigma2"), "n_inner": 10,
            "lambda_min": 1e-6, "n_samples": 10, "gamma": 20.0, "C_T": preset.default("C_T")}
    for key, value in fill.items():
        if key in allowed and getattr(f, key) is None and not (f.kind == "mean" and key in ("sigma2", "n_samples")):
            setattr(f, key, value)
    if f.kind == "mean" and f.sigma2 is not None and f.n_samples is None:
        f.n_samples = 10
    if f.kind in ("cvar", "cvar_dro") and f.C_T is None:
        raise ConfigError(f"formulation {f.kind!r} requires key 'C_T'", header_line.get("formulation"))
    if f.beta is not None and not 0 < f.beta < 1:
        raise ConfigError("beta must lie in (0, 1)", seen.get(("formulation", "beta")))
    if cfg.optimizer.iterations < 1:
        raise ConfigError("iterations must be >= 1", seen.get(("optimizer", "iterations")))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    out = []
    for name in _SECTIONS:
        sec = getattr(cfg, name)
        out.append(f"[{name}]")
        for fld in fields(sec):
            value = getattr(sec, fld.name)
            if value is not None:
                out.append(f"{fld.name} = {_format(value)}")
        out.append("")
    return "\n".join(out)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# -- building a run ------------------------------------------------------------------

@dataclass
class Setup:
    problem: DesignProblem
    settings: OptimizerSettings
    geometry: object
    model: ElasticModel
    density_filter: DensityFilter
    basis: Optional[KLBasis] = None


def _kernel_space(center, sigma2, radius):
    R = default_radius(np.sqrt(sigma2), center) if radius is None else radius
    return ParameterSpace.ball(center, R)


def build_setup(cfg: RunConfig, threads: Optional[int] = None) -> Setup:
    p, f, o = cfg.problem, cfg.formulation, cfg.optimizer
    preset = get_preset(p.preset)
    geo = preset.build(p.nx, p.ny, p.patch_fraction)
    mat = MaterialModel(E=cfg.material.E, nu=cfg.material.nu, eta=cfg.material.eta, p=cfg.material.p)
    model = ElasticModel(geo.grid, mat, geo.bc, passive=geo.passive, tol=p.tol, solver=p.solver)
    filt = DensityFilter(geo.grid, p.filter_radius, model.active)
    basis = None
    if p.preset == "gripper-1x1":
        if p.kl_basis_file and Path(p.kl_basis_file).exists():
            basis = KLBasis.load(p.kl_basis_file)
        else:
            basis = build_kl_basis(geo.grid, CovarianceSpec(p.kl_amplitude, p.kl_length), p.kl_modes)
            if p.kl_basis_file:
                basis.save(p.kl_basis_file)
        nominal = np.zeros((1, basis.k))
        cost = MisfitCost(model, basis, ModulusTransform(), geo.extra["load"], geo.extra["u_target"],
                          geo.extra["chi"], filt, p.penalty_volume, p.penalty_compliance, threads)
    else:
        nominal = geo.nominal
        cost = ComplianceCost(model, filt, threads)
    weights = geo.weights
    center = nominal.T @ (np.full(len(nominal), 1 / len(nominal)) if weights is None else weights)
    sigma2 = f.sigma2 if f.sigma2 is not None else preset.default("sigma2")
    space = _kernel_space(center, sigma2, f.radius)
    gaussian = f.kind in ("moment", "cvar") or (f.kind == "mean" and f.sigma2 is not None)
    if gaussian:
        law = TruncatedGaussian(center, sigma2 * np.eye(center.size), space)
    else:
        law = Empirical(nominal, weights)
    wcfg = mcfg = ccfg = None
    if f.kind in ("wasserstein", "cvar_dro"):
        wcfg = WassersteinConfig(f.m, f.eps, ReferenceKernel(sigma2, space), f.n_inner, f.lambda_min)
    if f.kind == "moment":
        mcfg = MomentConfig(center, sigma2 * np.eye(center.size), f.m1, f.m2, f.eps, space, f.n_samples)
    if f.kind in ("cvar", "cvar_dro"):
        ccfg = CvarConfig(f.beta, f.C_T, f.gamma, wcfg)
    form = Formulation(f.kind, law, wcfg, mcfg, ccfg, f.n_samples or 10, f.frozen)
    vt = p.volume_target
    if vt is None and preset.default("volume_fraction") is not None:
        vt = preset.default("volume_fraction") * model.domain_volume
    init = None
    if f.kind in ("cvar", "cvar_dro") and vt is not None:
        init = vt / model.domain_volume
        vt = None
    problem = DesignProblem(cost, model, form, vt, o.seed, init)
    settings = OptimizerSettings(
        iterations=o.iterations, step=o.step,
        aux_steps={"lam": o.step_lambda, "tau": o.step_tau, "S": o.step_S, "alpha": o.step_alpha},
        t0=o.t0, range_step=o.range_step, active_tol=o.active_tol, max_restore=o.max_restore)
    return Setup(problem, settings, geo, model, filt, basis)


# -- writers -------------------------------------------------------------------------

def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def density_pixels(h, grid) -> np.ndarray:
    """``(ny, nx)`` bytes, top row first; material dark."""
    h = np.asarray(h, dtype=float).reshape(grid.ny, grid.nx)
    return np.rint(255.0 * (1.0 - np.clip(h, 0.0, 1.0))).astype(np.uint8)[::-1]


def write_density_pgm(h, grid, path) -> None:
    header = f"P5\n{grid.nx} {grid.ny}\n255\n".encode("ascii")
    _atomic_write(path, header + density_pixels(h, grid).tobytes())


def read_density_pgm(path) -> np.ndarray:
    """Design stored in a P5 file (quantised to 1/255), element order."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    nx, ny = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data[pos + 1:pos + 1 + nx * ny], dtype=np.uint8).reshape(ny, nx)
    return (1.0 - pix[::-1].astype(float) / 255.0).ravel()


def write_field_vtk(fields_, grid, path) -> None:
    """Legacy ASCII structured-points file with one cell array per entry of ``fields_``."""
    buf = io.StringIO()
    buf.write("# vtk DataFile Version 3.0\ndrtopo element fields\nASCII\nDATASET STRUCTURED_POINTS\n")
    buf.write(f"DIMENSIONS {grid.nx + 1} {grid.ny + 1} 1\nORIGIN 0 0 0\n")
    buf.write(f"SPACING {grid.hx!r} {grid.hy!r} 1\nCELL_DATA {grid.n_elements}\n")
    for name, values in fields_.items():
        values = np.asarray(values, dtype=float).ravel()
        if values.size != grid.n_elements:
            raise ValueError(f"field {name!r} has {values.size} values, grid has {grid.n_elements} elements")
        buf.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        buf.write("\n".join(repr(float(v)) for v in values))
        buf.write("\n")
    _atomic_write(path, buf.getvalue().encode("ascii"))


def _cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_log_csv(log: ConvergenceLog, path) -> None:
    cols = log.columns()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in log.rows:
        writer.writerow([_cell(row.get(c, float("nan"))) for c in cols])
    _atomic_write(path, buf.getvalue().encode("ascii"))


def read_log_csv(path) -> ConvergenceLog:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for r in reader:
            rows.append({k: (int(v) if k == "iter" else float(v)) for k, v in r.items()})
    return ConvergenceLog(rows)


def write_outputs(setup: Setup, state, log: ConvergenceLog, directory, cfg: RunConfig) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    grid = setup.geometry.grid
    h = np.asarray(state.blocks["h"], dtype=float)
    buf = io.BytesIO()
    np.save(buf, h)
    _atomic_write(out / "design.npy", buf.getvalue())
    write_log_csv(log, out / "log.csv")
    _atomic_write(out / "config.txt", serialize_config(cfg).encode("utf-8"))
    if cfg.output.pgm:
        write_density_pgm(h, grid, out / "density.pgm")
    if cfg.output.vtk:
        fields_ = {"design": h, "physical": setup.density_filter.apply(h),
                   "active": setup.model.active.astype(float)}
        write_field_vtk(fields_, grid, out / "fields.vtk")


# -- commands -------------------------------------------------------------------------

def optimize(cfg: RunConfig, output: Optional[str] = None, threads: Optional[int] = None):
    """Run one optimisation and write its outputs; returns ``(state, log, setup)``."""
    setup = build_setup(cfg, threads)
    directory = output or cfg.output.directory
    try:
        state, log = run(setup.problem.optimization_problem(), setup.settings)
    except OptimizationAborted as err:
        Path(directory).mkdir(parents=True, exist_ok=True)
        write_log_csv(err.log, Path(directory) / "log.csv")
        raise
    write_outputs(setup, state, log, directory, cfg)
    return state, log, setup


def load_design(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".pgm":
        return read_density_pgm(path)
    raise ValueError(f"unsupported design file {path}; use .npy or .pgm")


def _parse_xi(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(",", " ").split()], dtype=float)
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse load vector {text!r}") from None


def evaluate(cfg: RunConfig, design, xis, stream=None) -> np.ndarray:
    """Cost of ``design`` at each scenario in ``xis``, printed as CSV."""
    stream = sys.stdout if stream is None else stream
    setup = build_setup(cfg)
    h = np.asarray(design, dtype=float)
    if h.size != setup.geometry.grid.n_elements:
        raise ValueError(f"design has {h.size} entries, grid has {setup.geometry.grid.n_elements} elements")
    k = setup.problem.formulation.law.dim
    pts = np.array(xis, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != k:
        raise ValueError(f"each load vector needs {k} components")
    values, _ = setup.problem.cost.evaluate_batch(h, pts)
    label = "compliance" if isinstance(setup.problem.cost, ComplianceCost) else "cost"
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow([f"xi_{i + 1}" for i in range(k)] + [label])
    for xi, v in zip(pts, values):
        writer.writerow([repr(float(x)) for x in xi] + [repr(float(v))])
    return values


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m drtopo",
                                     description="Distributionally robust density-based topology optimization.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_opt = sub.add_parser("optimize", help="run an optimisation from a config file")
    p_opt.add_argument("config")
    p_opt.add_argument("--output", help="output directory (overrides [output] directory)")
    p_eval = sub.add_parser("evaluate", help="out-of-sample cost of a design")
    p_eval.add_argument("config")
    p_eval.add_argument("--design", required=True, help=".npy or .pgm design file")
    p_eval.add_argument("--xi", required=True, action="append", type=_parse_xi,
                        help="load vector, comma separated; repeat for several scenarios")
    p_orc = sub.add_parser("oracle", help="run a verification suite")
    p_orc.add_argument("--suite", default="all")
    argv = list(sys.argv[1:] if argv is None else argv)
    # glue "--xi VALUE" so that load vectors starting with "-" are not read as options
    for i in range(len(argv) - 2, -1, -1):
        if argv[i] == "--xi":
            argv[i:i + 2] = [f"--xi={argv[i + 1]}"]
    args = parser.parse_args(argv)

    try:
        if args.command == "optimize":
            cfg = load_config(args.config)
            state, log, _ = optimize(cfg, args.output)
            last = log.rows[-1]
            print(f"{len(log)} iterations, objective {last['objective']!r}, volume {last['volume']!r}")
        elif args.command == "evaluate":
            evaluate(load_config(args.config), load_design(args.design), args.xi)
        else:
            from .suites import run_suites
            ok = run_suites(args.suite)
            return 0 if ok else 1
    except (ConfigError, ValueError, OSError, OptimizationAborted) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0
