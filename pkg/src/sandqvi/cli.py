"""Command-line front end: ``sandqvi <command> --config cfg.json --out dir``.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 optimality check failed.
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import control, optimality
from .config import parse_config
from .constraint import BoundParams, ConstraintSystem, bound_smooth, slope_norm, slope_violation
from .dynamics import (
    SolveOptions,
    TimeGrid,
    mosco_beta,
    solve_discrete_qvi,
    solve_vi_frozen,
)
from .errors import ConfigError, SolverError
from .grid import RegionMask, apply_gradient, build_grid, region_weights

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4
COMMANDS = ("simulate", "optimize", "check", "gamma-sweep", "mosco-test")




def _num(x):
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else _num(x)
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer, str)) else _num(v) for v in row])


def load_field_csv(path, g, column):
    """Read a per-node field from a ``node,<column>`` CSV."""
    values = np.full(g.N, np.nan)
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                values[int(row["node"])] = float(row[column])
    except OSError as exc:
        raise ConfigError(path, exc.strerror or str(exc)) from None
    except (KeyError, ValueError, IndexError) as exc:
        raise ConfigError(path, f"malformed {column} field: {exc}") from None
    if np.isnan(values).any():
        raise ConfigError(path, f"missing nodes in {column} field")
    return values


def write_field_csv(path, field, column):
    write_csv(path, ["node", column], ((i, v) for i, v in enumerate(field)))




class Experiment:
    """Concrete numerical objects derived from a validated config."""

    def __init__(self, cfg, base_dir="."):
        self.cfg = cfg
        self.g = build_grid(cfg.grid.nx, cfg.grid.ny)
        m = cfg.material
        self.bp = BoundParams(m.alpha, m.eps_interp, m.eps_smooth, m.p)
        self.tg = TimeGrid(cfg.time.T, cfg.time.M)
        s = cfg.solver
        self.opts = SolveOptions(
            tuple(s.gamma_schedule), s.inner_tol, s.picard_tol, s.picard_max, s.damping, s.newton_tol, s.newton_max
        )
        self.base_dir = base_dir
        self.y0_ref = self._support()
        self.f = self._source()

    def _path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def _support(self):
        sup = self.cfg.support
        X, _ = self.g.coords()
        if sup.kind == "flat":
            return np.full(self.g.N, float(sup.height))
        if sup.kind == "ramp":
            return sup.height + sup.slope * X
        return load_field_csv(self._path(sup.path), self.g, "height")

    def _source(self):
        src = self.cfg.source
        g = self.g
        if src.kind == "uniform":
            return np.full(g.N, float(src.rate))
        if src.kind == "custom":
            return load_field_csv(self._path(src.path), g, "rate")
        X, Y = g.coords()
        loc = list(src.location) + [0.0]
        i = int(np.argmin((X - loc[0]) ** 2 + (Y - loc[1]) ** 2 * (g.dim == 2)))
        f = np.zeros(g.N)
        f[i] = src.rate / g.cell_area
        return f

    def control_problem(self):
        c = self.cfg.control
        x0, x1, ya, yb = c.region
        a = region_weights(self.g, RegionMask.rectangle(self.g, x0, x1, ya, yb))
        return control.ControlProblem(
            self.g, a, c.sigma, self.y0_ref, c.lambda0, c.lambda1, self.tg, self.f, self.bp, c.gamma, c.scheme
        )

    def control_init(self, cp):
        c = self.cfg.control
        if c.init_path:
            return load_field_csv(self._path(c.init_path), self.g, "height")
        return cp.lower.copy()




def cmd_simulate(exp, out, args):
    traj = solve_discrete_qvi(exp.y0_ref, exp.f, exp.tg, exp.bp, exp.opts, exp.g)
    rows = (
        (t, i, traj.states[j, i]) for i in range(exp.g.N) for j, t in enumerate(exp.tg.times)
    )
    write_csv(os.path.join(out, "trajectory.csv"), ["t", "node", "height"], rows)
    final = traj.states[-1]
    M_final = bound_smooth(final, exp.y0_ref, exp.bp, exp.g)
    d1, d2 = apply_gradient(exp.g, final)

    write_json(
        os.path.join(out, "feasibility.json"),
        {
            "picard_iterations": [s.picard_iterations for s in traj.steps],
            "step_violation": [s.violation for s in traj.steps],
            "final_slope_excess": float(np.max(slope_norm(d1, d2, exp.bp.p) - M_final)),
            "final_violation": slope_violation(final, M_final, exp.g, exp.bp.p),
            "inner_tol": exp.opts.inner_tol,
        },
    )
    return EXIT_OK


def cmd_optimize(exp, out, args):
    cp = exp.control_problem()
    c = exp.cfg.control
    rep = control.optimize_control(exp.control_init(cp), cp, tol=c.tol, max_iter=c.max_iter, seed=exp.cfg.seed)
    write_json(
        os.path.join(out, "report.json"),
        {
            "objective_history": rep.iterates,
            "projected_gradient_history": rep.grad_norm_history,
            "step_sizes": rep.step_sizes,
            "final_objective": rep.iterates[-1],
            "final_y0": rep.final_y0,
            "vi_residual": rep.vi_residual,
            "converged": rep.converged,
            "message": rep.message,
        },
    )
    write_field_csv(os.path.join(out, "y0_final.csv"), rep.final_y0, "height")
    return EXIT_OK


def cmd_check(exp, out, args):
    cp = exp.control_problem()
    y0 = exp.control_init(cp)
    bp_inf = exp.bp.with_p(np.inf)
    traj = solve_discrete_qvi(y0, exp.f, exp.tg, bp_inf, exp.opts, exp.g)
    cs = ConstraintSystem(exp.g, bp_inf)
    act = exp.cfg.solver.act_tol or 10.0 * exp.opts.inner_tol
    cert = optimality.recover_certificate(traj, y0, cp, cs, mode=args.mode, act_tol=act)
    rep = optimality.kkt_residuals(traj, y0, cert, cp, cs, mode=args.mode, tol=exp.cfg.solver.check_tol)
    write_json(
        os.path.join(out, "residuals.json"),
        {
            "mode": args.mode,
            "act_tol": act,
            "residuals": rep.residuals,
            "tolerances": rep.tolerances,
            "passed": rep.passed,
            "nnls_residual": cert.residuals["nnls"],
        },
    )
    return EXIT_OK if rep.ok else EXIT_CHECK


def cmd_gamma_sweep(exp, out, args):
    rng = np.random.default_rng(exp.cfg.seed)
    g, tau = exp.g, exp.tg.tau
    y_prev = exp.y0_ref
    target = y_prev + tau * exp.f + exp.cfg.sweep.noise * g.h * rng.uniform(-1.0, 1.0, g.N)
    M_frozen = bound_smooth(y_prev, exp.y0_ref, exp.bp, g)
    opts = dataclasses.replace(exp.opts, early_stop=False)
    sol = solve_vi_frozen(y_prev, target, M_frozen, opts, g, p=exp.bp.p, raise_on_failure=False)
    rows = list(zip(sol.gammas, sol.violations)) or [(float("nan"), 0.0)]
    write_csv(os.path.join(out, "violations.csv"), ["gamma", "max_violation"], rows)
    return EXIT_OK


def cmd_mosco(exp, out, args):
    rng = np.random.default_rng(exp.cfg.seed)
    g, alpha, p = exp.g, exp.bp.alpha, exp.bp.p
    rows = []
    for trial in range(exp.cfg.sweep.trials):
        Mstar = alpha + rng.random(g.N)
        w = rng.standard_normal(g.N)
        d1, d2 = apply_gradient(g, w)
        w *= rng.random() / np.max(slope_norm(d1, d2, p) / Mstar)
        pert = rng.uniform(-1.0, 1.0, g.N)
        for n in range(1, 6):
            Mn = np.maximum(Mstar + pert * 0.5**n, alpha)
            beta = mosco_beta(Mn, Mstar, alpha)
            viol = slope_violation(beta * w, Mn, g, p)
            rows.append((trial, n, float(np.max(np.abs(Mn - Mstar))), beta, viol))
    write_csv(os.path.join(out, "beta.csv"), ["trial", "n", "distance", "beta", "violation"], rows)
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "check": cmd_check,
    "gamma-sweep": cmd_gamma_sweep,
    "mosco-test": cmd_mosco,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sandqvi", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON experiment definition")
    parser.add_argument("--out", required=True, help="output directory (created if missing)")
    parser.add_argument("--mode", choices=optimality.MODES, default="derived-consistent")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(command, cfg, out, mode="derived-consistent", base_dir="."):
    """Execute ``command`` and return its exit status."""
    os.makedirs(out, exist_ok=True)
    args = argparse.Namespace(mode=mode)
    try:
        exp = Experiment(cfg, base_dir)
        return HANDLERS[command](exp, out, args)
    except ConfigError as exc:
        write_json(os.path.join(out, "errors.json"), {"kind": "config", "path": exc.path, "message": str(exc)})
        return EXIT_CONFIG
    except SolverError as exc:
        write_json(
            os.path.join(out, "errors.json"),
            {"kind": type(exc).__name__, "message": str(exc), "info": exc.info},
        )
        return EXIT_SOLVER


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed", "must be a nonnegative integer")
            cfg.seed = args.seed
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        os.makedirs(args.out, exist_ok=True)
        write_json(os.path.join(args.out, "errors.json"), {"kind": "config", "message": str(exc)})
        return EXIT_CONFIG
    base = os.path.dirname(os.path.abspath(args.config))
    status = run(args.command, cfg, args.out, args.mode, base)
    if status == EXIT_SOLVER:
        print("solver failure; see errors.json", file=sys.stderr)
    elif status == EXIT_CHECK:
        print("optimality check failed; see residuals.json", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
