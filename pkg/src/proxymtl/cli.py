"""Command-line front end.

    proxymtl fit --bundle DIR --penalty sparse --lambda 0.1 --out B.csv
    proxymtl tune --bundle DIR --penalty lowrank --method lepski --out tune.csv
    proxymtl experiment --scenario tau-sweep --penalty sparse --reps 20 --seed 0 --out tau.csv

Exit codes: 0 success, 1 bad input, 2 the solver hit its iteration limit.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import AUTO, FitConfig, MissingFile, ParseError, PenaltySpec, ProxyMTLError, load_bundle, \
    read_matrix_csv, write_matrix_csv
from .experiments import SCENARIOS, ExperimentSettings, rows_to_csv, run_experiment, summarize_rows
from .solver import Divergence, fit, lipschitz_bound
from .tuning import default_grid, holdout_errors, lepski_select

log = logging.getLogger("proxymtl")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for non-convergence here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _step(value: str):
    if value == AUTO:
        return AUTO
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"step must be a positive number or 'auto', got {value!r}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar(out: Path) -> Path:
    return out.with_suffix(".json")


def _fit_config(args) -> FitConfig:
    return FitConfig(step_size=args.step, max_iters=args.max_iters, tol=args.tol)


def _add_solver_flags(p):
    p.add_argument("--step", type=_step, default=AUTO, help="step size, or 'auto' for 1/L")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=50000)


def cmd_fit(args) -> int:
    bundle = load_bundle(args.bundle)
    res = fit(bundle, args.penalty, args.lam, _fit_config(args))
    out = Path(args.out)
    write_matrix_csv(out, res.B_hat)
    _write_json(_sidecar(out), {"objective": res.objective, "iterations": res.iterations,
                                "converged": res.converged, "lambda": res.lam})
    if not res.converged:
        print(f"warning: no convergence within {res.iterations} iterations", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def load_holdout(dir_path):
    """Per-task hold-out (X, Y) listed in ``DIR/manifest.json`` as ``{"tasks": [{"X": ..., "Y": ...}]}``."""
    path = Path(dir_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise MissingFile(f"hold-out manifest not found: {path}")
    try:
        entries = json.loads(path.read_text())["tasks"]
        files = [(e["X"], e["Y"]) for e in entries]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed hold-out manifest {path}: {exc}") from None
    X = [read_matrix_csv(path.parent / x) for x, _ in files]
    Y = [read_matrix_csv(path.parent / y).reshape(-1) for _, y in files]
    return X, Y


def _walk_path(bundle, spec, grid, config):
    # Descending warm-started fits; stops at the first lambda with no minimizer.
    fits = [None] * grid.size
    L = lipschitz_bound(bundle)
    init = None
    for j in range(grid.size - 1, -1, -1):
        try:
            fits[j] = fit(bundle, spec, grid[j], config, init=init, lipschitz=L)
        except Divergence as exc:
            log.warning("%s; smaller lambdas are skipped", exc)
            break
        init = fits[j].B_hat
    return fits


def cmd_tune(args) -> int:
    if args.method == "holdout" and not args.holdout:
        raise InputError("--method holdout requires --holdout DIR")
    spec = PenaltySpec.parse(args.penalty)
    bundle = load_bundle(args.bundle)
    holdout = load_holdout(args.holdout) if args.method == "holdout" else None
    grid = default_grid(bundle, spec, args.grid_size, args.grid_min_ratio)
    fits = _walk_path(bundle, spec, grid, _fit_config(args))
    first = next(j for j in range(grid.size) if fits[j] is not None) if fits[-1] is not None else None
    if first is None:
        raise InputError("the objective is unbounded below even at lambda_max")
    fitted = fits[first:]
    M = grid.size
    summary = {"method": args.method, "grid": grid.tolist(), "penalty": spec.value}
    header = ["index", "lambda", "fitted"]
    columns: List[list] = [list(range(M)), grid.tolist(), [f is not None for f in fits]]
    if args.method == "lepski":
        rep = lepski_select(bundle, fitted, grid[first:], spec, args.cbar)
        chosen = first + rep.chosen_index
        feasible = [False] * first + rep.feasible_set
        gaps = np.full((M, M), np.nan)
        gaps[first:, first:] = rep.pairwise_gaps
        summary.update(cbar=args.cbar, feasible=feasible,
                       pairwise_gaps=[[None if np.isnan(g) else float(g) for g in row] for row in gaps])
        header += ["feasible"] + [f"gap_{k}" for k in range(M)]
        columns += [feasible] + [gaps[:, k].tolist() for k in range(M)]
    else:
        errs = np.full(M, np.nan)
        errs[first:] = holdout_errors(fitted, *holdout)
        # ties go to the larger lambda
        chosen = int(np.flatnonzero(errs == np.nanmin(errs)).max())
        summary["holdout_errors"] = [None if np.isnan(e) else float(e) for e in errs]
        header.append("holdout_error")
        columns.append(errs.tolist())
    summary.update(chosen_index=chosen, chosen_lambda=float(grid[chosen]))
    header.append("chosen")
    columns.append([j == chosen for j in range(M)])
    out = Path(args.out)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    _write_json(_sidecar(out), summary)
    if not all(f.converged for f in fitted):
        print("warning: some path fits hit the iteration limit", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_experiment(args) -> int:
    if args.scenario not in SCENARIOS:
        raise InputError(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)}")
    if args.reps < 1:
        raise InputError("--reps must be at least 1")
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise MissingFile(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed config {args.config}: {exc}") from None
    try:
        settings = ExperimentSettings.from_dict(config, penalty=PenaltySpec.parse(args.penalty),
                                                reps=args.reps, seed=args.seed)
    except TypeError as exc:
        raise InputError(f"bad config: {exc}") from None
    rows = run_experiment(args.scenario, settings)
    out = Path(args.out)
    out.write_text(rows_to_csv(rows), encoding="utf-8")
    _write_json(_sidecar(out), {"scenario": args.scenario, "penalty": settings.penalty.value,
                                "reps": settings.reps, "seed": settings.seed, "config": config,
                                "summary": summarize_rows(rows)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proxymtl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit one lambda")
    p.add_argument("--bundle", required=True)
    p.add_argument("--penalty", required=True, choices=[s.value for s in PenaltySpec])
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    _add_solver_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tune", help="choose lambda on a grid")
    p.add_argument("--bundle", required=True)
    p.add_argument("--penalty", required=True, choices=[s.value for s in PenaltySpec])
    p.add_argument("--method", required=True, choices=["lepski", "holdout"])
    p.add_argument("--cbar", type=float, default=1.0)
    p.add_argument("--grid-size", type=int, default=20)
    p.add_argument("--grid-min-ratio", type=float, default=0.01)
    p.add_argument("--holdout")
    _add_solver_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("experiment", help="run a simulation scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--penalty", required=True, choices=[s.value for s in PenaltySpec])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with scenario overrides")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ProxyMTLError, InputError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
