"""Command-line entry point: ``halfdiff <subcommand> config.toml``.

Exit status 0 on success, 1 when the configuration is invalid (nothing is
written), 2 when a computation fails.  ``HALFDIFF_OUTPUT_DIR`` overrides
``output.directory``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .carleman import (
    GeometryError,
    build_cutoffs,
    build_level_sets,
    build_weight,
    check_combined_carleman,
    check_elliptic_carleman,
    check_parabolic_carleman,
    random_space_field,
    random_space_time_field,
)
from .config import ConfigError, RunConfig, as_space_fn, as_space_time_fn, load_config
from .forward import SolverError, SourceSpec, evaluate_space_time, solve_forward
from .grid import (
    EquationCoefficients,
    Field,
    GridError,
    SpatialGrid,
    TimeGrid,
    assemble_elliptic,
    export_csv,
    save_field,
)
from .inverse import (
    HypothesisError,
    assemble_observation_map,
    default_omega,
    reconstruct,
    relative_h2_error,
    stability_experiment,
    synthesize_data,
)
from .reduction import check_reduced_equation, compute_F, compute_G

log = logging.getLogger("halfdiff")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, GridError, GeometryError, HypothesisError)


# ---------------------------------------------------------------------------
# building validated objects


@dataclass
class Problem:
    cfg: RunConfig
    grid: SpatialGrid
    tg: TimeGrid
    coeffs: EquationCoefficients
    coef_specs: dict
    source: SourceSpec | None
    exact: Callable | None

    def operator(self, grid: SpatialGrid | None = None):
        s = self.coef_specs
        return assemble_elliptic(grid or self.grid, s["a"], s["b"], s["c"], s["m"])


def _coefficient(value, dim: int, path: str, kind: str):
    if kind == "a" and isinstance(value, list):
        if len(value) != dim or any(not isinstance(r, list) or len(r) != dim for r in value):
            raise ConfigError(f"{path}: expected a {dim}x{dim} nested list")
        fns = [[as_space_fn(v, dim, f"{path}[{i}][{j}]") for j, v in enumerate(r)] for i, r in enumerate(value)]
        return lambda *X: np.array([[np.broadcast_to(_eval(f, X), X[0].shape) for f in r] for r in fns])
    if kind == "b" and isinstance(value, list):
        if len(value) != dim:
            raise ConfigError(f"{path}: expected {dim} entries")
        fns = [as_space_fn(v, dim, f"{path}[{j}]") for j, v in enumerate(value)]
        return lambda *X: np.array([np.broadcast_to(_eval(f, X), X[0].shape) for f in fns])
    return as_space_fn(value, dim, path)


def _eval(f, X):
    return f(*X) if callable(f) else np.full(X[0].shape, f)


def build_problem(cfg: RunConfig, need_source: bool = True) -> Problem:
    g = cfg.grid
    dim = g["dim"]
    extents = g["extents"]
    if dim == 1 and extents and not isinstance(extents[0], list):
        extents = [extents]
    n_cells = g["n_cells"] if isinstance(g["n_cells"], list) else [g["n_cells"]] * dim
    if len(extents) != dim or len(n_cells) != dim:
        raise ConfigError(f"grid.extents and grid.n_cells need {dim} entries")
    gamma = g["gamma"] if isinstance(g["gamma"], list) else [g["gamma"]]
    grid = SpatialGrid(tuple(tuple(float(v) for v in e) for e in extents), tuple(n_cells), tuple(gamma))
    tg = TimeGrid(g["T"], g["n_steps"], g["t0_index"], g["delta"])
    eq = cfg.equation
    try:
        coeffs = EquationCoefficients(eq["rho1"], eq["rho2"], eq["allow_degenerate"])
    except GridError as exc:
        raise ConfigError(f"equation: {exc}") from None
    specs = {
        "a": _coefficient(eq["a"], dim, "equation.a", "a"),
        "b": _coefficient(eq["b"], dim, "equation.b", "b"),
        "c": as_space_fn(eq["c"], dim, "equation.c"),
        "m": eq["m"],
    }
    src_cfg = cfg.source
    source = None
    if src_cfg["g"] is not None:
        source = SourceSpec(g_general=as_space_time_fn(src_cfg["g"], dim, "source.g"))
    elif src_cfg["f"] is not None:
        source = SourceSpec(
            f=as_space_fn(src_cfg["f"], dim, "source.f"),
            R=as_space_time_fn(src_cfg["R"], dim, "source.R"),
        )
    if need_source and source is None:
        raise ConfigError("missing required key source.g (or source.f and source.R)")
    exact = as_space_time_fn(src_cfg["exact"], dim, "source.exact") if src_cfg["exact"] is not None else None
    prob = Problem(cfg, grid, tg, coeffs, specs, source, exact)
    prob.operator()  # ellipticity and symmetry checks
    if source is not None:
        vals = source.evaluate(grid, tg)
        if not np.all(np.isfinite(vals)):
            raise ConfigError("source: expression is not finite at every node")
    return prob


# ---------------------------------------------------------------------------
# artifacts


@dataclass
class Artifacts:
    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def csv(self, name: str, header: list[str], rows: list[list]):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        self.files[name] = buf.getvalue()

    def field(self, name: str, fld: Field):
        self.files[name] = fld


def _write(out: Path, art: Artifacts, cfg: RunConfig, sub: str, wall: float):
    out.mkdir(parents=True, exist_ok=True)
    formats = cfg.output["formats"]
    written = []
    for name, content in art.files.items():
        if isinstance(content, Field):
            if "npz" in formats:
                save_field(out / f"{name}.npz", content)
                written.append(f"{name}.npz")
            if "csv" in formats:
                export_csv(out / f"{name}.csv", content)
                written.append(f"{name}.csv")
        else:
            (out / name).write_text(content)
            written.append(name)
    (out / "summary.json").write_text(json.dumps(art.summary, indent=2, sort_keys=True, default=float) + "\n")
    manifest = {
        "subcommand": sub,
        "config": cfg.path,
        "config_sha256": cfg.sha256,
        "wall_time_s": wall,
        "artifacts": written + ["summary.json"],
        "versions": _versions(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    import scipy
    import sympy

    return {
        "halfdiff": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "sympy": sympy.__version__,
    }


# ---------------------------------------------------------------------------
# subcommands: each returns a validation step and a compute step


def _forward(cfg: RunConfig):
    prob = build_problem(cfg)

    def compute(art: Artifacts):
        L = prob.operator()
        rep = solve_forward(prob.coeffs, L, prob.source, prob.tg)
        art.field("solution", rep.solution)
        art.summary.update(max_step_residual=rep.max_residual, scheme=rep.scheme)
        if prob.exact is not None:
            rows = []
            prev = None
            for k in range(3):
                grid = prob.grid.refined(2**k) if k else prob.grid
                tg = prob.tg.refined(2**k) if k else prob.tg
                u = rep.solution.values if k == 0 else solve_forward(prob.coeffs, prob.operator(grid), prob.source, tg).solution.values
                err = float(np.abs(u - evaluate_space_time(prob.exact, grid, tg)).max())
                order = float(np.log2(prev / err)) if prev and err > 0 else float("nan")
                rows.append([grid.n_cells[0], tg.n_steps, err, order])
                prev = err
            art.csv("convergence.csv", ["n_cells", "n_steps", "max_error", "order"], rows)
            art.summary["max_error"] = rows[0][2]

    return compute


def _reduce(cfg: RunConfig):
    prob = build_problem(cfg)
    red = cfg.reduction
    if not (isinstance(red["levels"], int) and red["levels"] >= 1):
        raise ConfigError("reduction.levels must be a positive integer")

    def compute(art: Artifacts):
        rows = []
        prev = None
        for k in range(red["levels"]):
            grid = prob.grid.refined(2**k) if k else prob.grid
            tg = prob.tg.refined(2**k) if k else prob.tg
            L = prob.operator(grid)
            u = solve_forward(prob.coeffs, L, prob.source, tg).solution.values
            if prob.source.separated:
                G = compute_F(prob.coeffs, L, prob.source.f_values(grid), prob.source.R_values(grid, tg), tg.dt)
            else:
                G = compute_G(prob.coeffs, L, prob.source.evaluate(grid, tg), tg.dt)
            r = check_reduced_equation(
                u, G, prob.coeffs, L, tg.dt, boundary_layers=red["boundary_layers"], cut_time=red["cut_time"]
            )
            factor = prev / r.l2_norm if prev and r.l2_norm > 0 else float("nan")
            rows.append([grid.n_cells[0], tg.n_steps, r.l2_norm, r.max_norm, factor])
            prev = r.l2_norm
        art.csv("reduction.csv", ["n_cells", "n_steps", "residual_l2", "residual_max", "factor"], rows)
        art.summary["residual_l2"] = [r[2] for r in rows]

    return compute


def _carleman(cfg: RunConfig):
    prob = build_problem(cfg, need_source=False)
    c = cfg.carleman
    omega = c["omega"]
    if omega is not None and prob.grid.dim == 1 and not isinstance(omega[0], list):
        omega = [omega]
    geom = build_weight(prob.grid, prob.tg, c["lambda"], c["epsilon"], prob.tg.delta, omega, c["extension"])
    levels = build_level_sets(geom)
    sweep = [float(s) for s in c["s_sweep"]]
    if len(sweep) < 3 or any(s <= 0 for s in sweep):
        raise ConfigError("carleman.s_sweep needs at least 3 positive values")

    def compute(art: Artifacts):
        cut = build_cutoffs(geom)
        L = prob.operator()
        rng = np.random.default_rng(c["seed"])
        rows = []
        flags = {"parabolic": [], "elliptic": [], "combined": []}
        for k in range(c["fields"]):
            v = random_space_time_field(geom, cut, rng)
            w = random_space_field(geom, cut, rng)
            reports = [
                check_parabolic_carleman(v, geom, L, prob.coeffs, sweep, levels),
                check_elliptic_carleman(w, geom, L, sweep, levels),
                check_combined_carleman(v, geom, L, prob.coeffs, sweep, levels),
            ]
            for rep in reports:
                flags[rep.kind].append(rep.tail_nonincreasing() and rep.status == "ok")
                for row in rep.rows():
                    rows.append([rep.kind, k] + [row[key] for key in
                                ("s", "lambda", "lhs", "residual_term", "ratio", "boundary_term", "log_scale")])
        art.csv(
            "carleman.csv",
            ["kind", "field", "s", "lambda", "lhs", "residual_term", "ratio", "boundary_term", "log_scale"],
            rows,
        )
        art.summary.update(
            beta=geom.beta, mu=list(geom.mu), d_max=geom.d_max, epsilon0=geom.epsilon0,
            invariants=geom.invariants(), level_set_counts=levels.counts(),
            tail_nonincreasing={k: all(v) for k, v in flags.items()},
        )

    return compute


def _inverse_setup(cfg: RunConfig):
    prob = build_problem(cfg)
    inv = cfg.inverse
    if not prob.source.separated:
        raise ConfigError("the inverse problem needs a separated source (source.f and source.R)")
    if not (isinstance(inv["basis_size"], int) and inv["basis_size"] >= 1):
        raise ConfigError("inverse.basis_size must be a positive integer")
    alpha = inv["alpha"]
    if not (alpha == "auto" or (isinstance(alpha, (int, float)) and not isinstance(alpha, bool) and alpha > 0)):
        raise ConfigError("inverse.alpha must be 'auto' or a positive number")
    R = prob.source.R
    # hypothesis check on R(., t0) before any solve
    r0 = np.abs(evaluate_space_time(R, prob.grid, prob.tg)[prob.tg.t0_index][prob.grid.interior_mask])
    if not (inv["force"] or r0.min() > 1e-6 * max(r0.max(), 1e-300)):
        raise HypothesisError(
            f"source.R vanishes at t0 (min |R(x, t0)| = {r0.min():.3g}); "
            "the stability theory requires |R(x, t0)| > 0"
        )
    omega = default_omega(prob.grid) if inv["omega"] is None else prob.grid.mask_from_box(
        [inv["omega"]] if prob.grid.dim == 1 and not isinstance(inv["omega"][0], list) else inv["omega"]
    )
    if not omega.any():
        raise ConfigError("inverse.omega contains no grid nodes")
    f_true = as_space_fn(inv["f_true"], prob.grid.dim, "inverse.f_true") if inv["f_true"] is not None else prob.source.f
    return prob, inv, R, omega, f_true


def _invert(cfg: RunConfig):
    prob, inv, R, omega, f_true = _inverse_setup(cfg)

    def compute(art: Artifacts):
        L = prob.operator()
        omap = assemble_observation_map(prob.coeffs, L, R, prob.tg, inv["basis_size"], force=inv["force"])
        data = synthesize_data(prob.coeffs, L, f_true, R, prob.tg, inv["refine"], prob.operator)
        noise_l2 = 0.0
        if inv["noise"] > 0:
            rng = np.random.default_rng(inv["seed"])
            noise = np.where(prob.grid.interior_mask, rng.standard_normal(prob.grid.shape), 0.0)
            noise *= inv["noise"] * np.abs(data).max()
            noise_l2 = float(np.sqrt(np.sum(prob.grid.quadrature_weights * noise**2)))
            data = data + noise
        res = reconstruct(omap, data, inv["alpha"], noise_level=noise_l2, M=inv["M"], method=inv["method"])
        art.field("f_hat", res.f_hat)
        ft = prob.grid.evaluate(f_true)
        art.summary.update(
            alpha=res.alpha, misfit=res.misfit, seminorm=res.seminorm, status=res.status,
            relative_h2_error_omega=relative_h2_error(res.f_hat.values, ft, prob.grid, omega),
            condition_number=omap.condition_number(),
        )

    return compute


def _stability(cfg: RunConfig):
    prob, inv, R, omega, f_true = _inverse_setup(cfg)
    levels = inv["noise_levels"]
    if len(levels) < 3:
        raise ConfigError("inverse.noise_levels needs at least 3 values for the fit")

    def compute(art: Artifacts):
        L = prob.operator()
        omap = assemble_observation_map(prob.coeffs, L, R, prob.tg, inv["basis_size"], force=inv["force"])
        rep = stability_experiment(omap, f_true, levels, inv["trials"], inv["seed"], inv["M"], omega)
        art.files["stability.csv"] = rep.to_csv()
        art.summary.update(kappa_hat=rep.kappa_hat, C_hat=rep.C_hat, r_squared=rep.r_squared, M=rep.M)

    return compute


SUBCOMMANDS = {
    "forward": _forward,
    "reduce-check": _reduce,
    "carleman-check": _carleman,
    "invert": _invert,
    "stability-experiment": _stability,
}


def run(subcommand: str, config_path: str, output_dir: str | None = None) -> int:
    t_start = time.perf_counter()
    try:
        cfg = load_config(config_path)
        compute = SUBCOMMANDS[subcommand](cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(output_dir or os.environ.get("HALFDIFF_OUTPUT_DIR") or cfg.output["directory"])
    art = Artifacts()
    try:
        compute(art)
    except (SolverError, FloatingPointError, np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    _write(out, art, cfg, subcommand, time.perf_counter() - t_start)
    print(json.dumps(art.summary, sort_keys=True, default=float))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="halfdiff", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=sorted(SUBCOMMANDS))
    parser.add_argument("config", help="TOML run configuration")
    parser.add_argument("-o", "--output", help="output directory (overrides config and environment)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return run(args.subcommand, args.config, args.output)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
