"""Command-line front end.

    mfgclear validate CONFIG
    mfgclear solve    CONFIG [--mode lq|nonlinear] [-M 16] [-K 64] [--seed 0] --out DIR
    mfgclear clearing CONFIG [--n-list 16,64,256,1024,4096] [--reps 32] --out DIR
    mfgclear riccati  CONFIG --out DIR

Exit codes: 0 success, 1 usage or parse error, 2 validation failure,
3 numerical failure (Riccati blow-up, divergence, no convergence).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .clearing import rate_sweep, wasserstein_diag, wasserstein_slope
from .config import ConfigError, config_hash, load_config
from .lq_affine import RiccatiBlowUp, riccati_table, solve_affine
from .mfg_solver import ConvergenceError, SolverConfig, solve_lq, solve_nonlinear_deterministic
from .model import ModelError, validate_model
from .multipop import (
    MultiPopSpec,
    build_multipop_scenarios,
    multipop_clearing_sweep,
    solve_multipop_lq,
    solve_stacked_mean_system,
    stacked_riccati_table,
)
from .report import RunManifest, paths_table, price_table, solution_table, write_csv
from .stochastics import build_scenarios

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
WORKERS_ENV = "MFGCLEAR_WORKERS"
DEFAULT_N_LIST = "16,64,256,1024,4096"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _n_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfgclear", description="Mean-field exchange clearing lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    base = _Parser(add_help=False)
    base.add_argument("config", type=Path, help="YAML model file")
    base.add_argument("--steps", type=_positive, help="override the number of time steps")
    base.add_argument("--allow-short-t", action="store_true", help="proceed when only a short horizon is covered")

    run = _Parser(add_help=False)
    run.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workers", type=_positive, help=f"worker threads (default: ${WORKERS_ENV} or 1)")
    run.add_argument("--no-plot", action="store_true", help="write CSV tables only")

    p = sub.add_parser("validate", parents=[base], help="check the standing assumptions")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve", parents=[base, run], help="compute the equilibrium price")
    p.add_argument("--mode", choices=("lq", "nonlinear"), default="lq")
    p.add_argument("-M", type=_positive, default=16, help="common-noise paths")
    p.add_argument("-K", type=int, default=64, help="idiosyncratic copies per common path (>= 2)")
    p.add_argument("--tol", type=float, default=SolverConfig.tol, help="nonlinear solver tolerance")
    p.add_argument("--max-iter", type=_positive, default=SolverConfig.max_iter)
    p.add_argument("--damping", type=float, default=SolverConfig.damping)
    p.add_argument("--dump-paths", action="store_true", help="also write paths.csv")
    p.add_argument("--dump-solution", action="store_true", help="also write solution.csv")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("clearing", parents=[base, run], help="finite-N clearing-rate sweep")
    p.add_argument("-M", type=_positive, default=64, help="common-noise paths")
    p.add_argument("-K", type=int, default=32, help="copies used for the moment estimate (>= 2)")
    p.add_argument("--n-list", type=_n_list, default=_n_list(DEFAULT_N_LIST), help=f"default {DEFAULT_N_LIST}")
    p.add_argument("--reps", type=_positive, default=32, help="replications per common path")
    p.add_argument("--wasserstein", action="store_true", help="also write wasserstein.csv (n = 1)")
    p.set_defaults(func=cmd_clearing)

    p = sub.add_parser("riccati", parents=[base, run], help="dump the Riccati coefficient functions")
    p.set_defaults(func=cmd_riccati)
    return parser


# ------------------------------------------------------------------ helpers


def _workers(args) -> int:
    if args.workers:
        return args.workers
    env = os.environ.get(WORKERS_ENV)
    if not env:
        return 1
    try:
        v = int(env)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV} must be a positive integer, got {env!r}") from None
    if v < 1:
        raise UsageError(f"{WORKERS_ENV} must be a positive integer, got {v}")
    return v


def _manifest(args, spec, mode: str, **options) -> RunManifest:
    return RunManifest(
        command=args.command,
        config=str(args.config),
        config_hash=config_hash(args.config),
        seed=getattr(args, "seed", None),
        grid={"T": spec.T, "S": spec.S},
        mode=mode,
        options=options,
    )


class _Outputs:
    """Collects written files into the manifest."""

    def __init__(self, args, manifest: RunManifest):
        self.dir = args.out
        self.plot = not args.no_plot
        self.manifest = manifest
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    def csv(self, name, table, int_cols):
        path = write_csv(self.dir / name, *table, int_cols=int_cols)
        self._add(path)

    def figure(self, name, fn, *a, **kw):
        if self.plot:
            self._add(fn(self.dir / name, *a, **kw))

    def _add(self, path):
        self.manifest.add_output(path)
        self.written.append(path)

    def close(self):
        self.manifest.write(self.dir)
        print(f"wrote {', '.join(p.name for p in self.written)} and manifest.json to {self.dir}")


def _plotting():
    from . import plotting

    return plotting


def _phase(timings: dict, name: str, start: float) -> float:
    now = time.perf_counter()
    timings[name] = round(now - start, 6)
    return now


# ------------------------------------------------------------------ commands


def cmd_validate(args) -> int:
    spec = load_config(args.config, steps=args.steps)
    if isinstance(spec, MultiPopSpec):
        reports = [validate_model(spec.population_model(p)) for p in range(spec.m)]
        for p, rep in enumerate(reports):
            print(f"population {p + 1} (weight {spec.weights[p]:g}):")
            print("\n".join("  " + line for line in rep.lines()))
        print(f"multi-population mode: {spec.mode}")
    else:
        reports = [validate_model(spec)]
        print("\n".join(reports[0].lines()))
    if all(r.solvable for r in reports):
        return EXIT_OK
    if args.allow_short_t:
        print("warning: only a short horizon is covered; continuing because --allow-short-t is set", file=sys.stderr)
        return EXIT_OK
    print("validation failed: the general-horizon checks do not hold (see --allow-short-t)", file=sys.stderr)
    return EXIT_VALIDATION


def cmd_solve(args) -> int:
    spec = load_config(args.config, steps=args.steps)
    if args.K < 2:
        raise UsageError("-K must be at least 2: conditional means are estimated from the copies")
    multi = isinstance(spec, MultiPopSpec)
    if multi and args.mode == "nonlinear":
        raise UsageError("nonlinear mode supports single-population models only")
    workers = _workers(args)
    grid = spec.grid
    timings: dict = {}
    start = time.perf_counter()
    man = _manifest(args, spec, args.mode, M=args.M, K=args.K, workers=workers)
    man.timings = timings

    if multi:
        scenarios = build_multipop_scenarios(spec, grid, args.M, args.K, args.seed, workers)
        start = _phase(timings, "scenarios", start)
        sol = solve_multipop_lq(spec, grid, scenarios, allow_short_t=args.allow_short_t)
        start = _phase(timings, "solve", start)
        price = price_table(sol.phi, grid.nodes, sol.ybars)
        history = np.array([[0, sol.in_sample_clearing_residual(spec)]])
        c0 = sol.populations[0].c0
        pops = sol.populations
    else:
        scenarios = [build_scenarios(spec, grid, args.M, args.K, args.seed, workers=workers)]
        start = _phase(timings, "scenarios", start)
        if args.mode == "lq":
            sol = solve_lq(spec, grid, scenarios[0], allow_short_t=args.allow_short_t)
            history = np.array([[0, sol.in_sample_clearing_residual()]])
        else:
            cfg = SolverConfig(tol=args.tol, max_iter=args.max_iter, damping=args.damping)
            sol = solve_nonlinear_deterministic(spec, grid, cfg, scenarios[0])
            res = np.asarray(sol.residual_history, dtype=float)
            history = np.column_stack([np.arange(1, res.size + 1), res])
        start = _phase(timings, "solve", start)
        price = price_table(sol.phi, grid.nodes)
        c0 = sol.c0
        pops = (sol,)

    out = _Outputs(args, man)
    out.csv("price.csv", price, 1)
    out.csv("diagnostics.csv", (["iter", "residual"], history), 1)
    suffix = (lambda p: f"_p{p + 1}") if multi else (lambda p: "")
    if args.dump_paths:
        for p, sc in enumerate(scenarios):
            out.csv(f"paths{suffix(p)}.csv", paths_table(sc), 2)
    if args.dump_solution:
        for p, ps in enumerate(pops):
            out.csv(f"solution{suffix(p)}.csv", solution_table(ps), 2)
    start = _phase(timings, "write", start)
    if out.plot:
        plotting = _plotting()
        out.figure("price.png", plotting.plot_price, grid.nodes, sol.phi, c0, sol.ybars if multi else None)
        if args.mode == "nonlinear":
            out.figure("residuals.png", plotting.plot_residuals, history[:, 1])
        _phase(timings, "plot", start)
    terminal = float(np.max(np.abs(sol.phi[:, -1] - c0[:, -1])))
    print(f"solved ({args.mode}): M={args.M} K={args.K} S={grid.S}; max |phi_T - c0_T| = {terminal:.3g}")
    out.close()
    return EXIT_OK


def cmd_clearing(args) -> int:
    spec = load_config(args.config, steps=args.steps)
    if args.K < 2:
        raise UsageError("-K must be at least 2: conditional means are estimated from the copies")
    if len(args.n_list) < 3:
        raise UsageError("--n-list needs at least three values to fit a slope")
    multi = isinstance(spec, MultiPopSpec)
    if multi and args.wasserstein:
        raise UsageError("--wasserstein supports single-population models only")
    workers = _workers(args)
    grid = spec.grid
    timings: dict = {}
    start = time.perf_counter()
    man = _manifest(
        args, spec, "multipop" if multi else "lq",
        M=args.M, K=args.K, reps=args.reps, n_list=args.n_list, workers=workers,
    )  # fmt: skip
    man.timings = timings

    if multi:
        sc = build_multipop_scenarios(spec, grid, args.M, args.K, args.seed, workers)
        sol = solve_multipop_lq(spec, grid, sc, allow_short_t=args.allow_short_t)
        start = _phase(timings, "solve", start)
        report = multipop_clearing_sweep(spec, sol, args.n_list, args.reps, args.seed, workers=workers)
    else:
        sc = build_scenarios(spec, grid, args.M, args.K, args.seed, workers=workers)
        sol = solve_lq(spec, grid, sc, allow_short_t=args.allow_short_t)
        start = _phase(timings, "solve", start)
        report = rate_sweep(spec, sol, args.n_list, args.reps, args.seed, workers=workers)
    start = _phase(timings, "sweep", start)

    out = _Outputs(args, man)
    out.csv("clearing.csv", (report.columns(), report.table()), 2)
    print(f"{'N':>6} {'metric':>12} {'stderr':>10} {'epsilon_N':>10} {'C_hat':>10}  bound")
    for row, ok in zip(report.rows, report.bound_holds):
        print(
            f"{row.N:>6} {row.metric:>12.5g} {row.stderr:>10.3g} {row.epsilon_N:>10.4g} {row.C_hat:>10.4g}"
            f"  {'ok' if ok else 'VIOLATED'}"
        )
    lo, hi = report.slope_ci
    print(f"log-log slope {report.slope:.4f} (95% CI {lo:.4f} .. {hi:.4f}); Gamma_hat = {report.gamma_hat:.5g}")

    wreports = []
    if args.wasserstein:
        S = grid.S
        nodes = np.unique(np.linspace(0, S, 5).round().astype(int)[1:])
        wreports = [wasserstein_diag(sol, spec, N, nodes, args.seed) for N in args.n_list]
        out.csv("wasserstein.csv", (["t", "N", "W1", "W2", "mean_gap"], np.vstack([w.rows() for w in wreports])), 0)
        frac = min(w.pass_fraction for w in wreports)
        print(f"Wasserstein: ordering holds at {100 * frac:.1f}% of nodes; E[W2^2] slope {wasserstein_slope(wreports):.3f}")
        start = _phase(timings, "wasserstein", start)
    if out.plot:
        plotting = _plotting()
        out.figure("clearing.png", plotting.plot_clearing, report)
        if wreports:
            out.figure("wasserstein.png", plotting.plot_wasserstein, wreports)
        _phase(timings, "plot", start)
    out.close()
    return EXIT_OK


def cmd_riccati(args) -> int:
    spec = load_config(args.config, steps=args.steps)
    grid = spec.grid
    timings: dict = {}
    start = time.perf_counter()
    man = _manifest(args, spec, "riccati")
    man.timings = timings
    if isinstance(spec, MultiPopSpec):
        table = stacked_riccati_table(solve_stacked_mean_system(spec, grid), grid, spec.n)
    else:
        table = riccati_table(solve_affine(spec, grid))
    start = _phase(timings, "solve", start)
    out = _Outputs(args, man)
    out.csv("riccati.csv", table, 0)
    if out.plot:
        out.figure("riccati.png", _plotting().plot_riccati, *table)
        _phase(timings, "plot", start)
    out.close()
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RiccatiBlowUp, ConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
