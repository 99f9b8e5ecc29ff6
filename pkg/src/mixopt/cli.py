"""Command-line driver: ``mixopt <subcommand> [options]``.

Exit codes: 0 success, 2 invalid input, 3 numerical non-convergence (output
is still written, flagged ``converged: false``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from fractions import Fraction
from pathlib import Path


from . import __version__
from .fitting import FitError, FitOptions, fit_all_domains, read_observations_csv
from .optimizer import PAPER_GRID_LEVELS, budget_sweep, grid_search, optimize_weights, sweep_differences
from .planner import (
    PipelineError,
    PlanError,
    SamplingSpec,
    emit_run_manifests,
    ingest_losses,
    make_plan,
    run_pipeline,
    write_json,
)
from .scaling_model import DomainParams, ModelDomainError
from .simulator import GroundTruth, recovery_experiment, simulate_losses, write_losses_csv
from .svg import line_plot, simplex_surface

logger = logging.getLogger("mixopt")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 2, 3


class InputError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(Fraction(t.strip())) for t in text.split(",") if t.strip()]
    except (ValueError, ZeroDivisionError):
        raise InputError(f"cannot parse number list {text!r}") from None


_SUFFIX = {"k": 10**3, "m": 10**6, "b": 10**9, "g": 10**9}


def _tokens(text: str) -> int:
    """Token count such as ``20000000``, ``2e7`` or ``20M``."""
    t = str(text).strip()
    scale = _SUFFIX.get(t[-1:].lower(), 1)
    if scale != 1:
        t = t[:-1]
    try:
        value = float(t) * scale
    except ValueError:
        raise InputError(f"cannot parse token count {text!r}") from None
    if not math.isfinite(value) or value != int(value):
        raise InputError(f"token count must be an integer, got {text!r}")
    return int(value)


def _budgets(text: str) -> list[int]:
    return [_tokens(t) for t in text.split(",") if t.strip()]


def _read_json(path):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON ({exc})") from None


def load_params(path) -> list[DomainParams]:
    data = _read_json(path)
    if isinstance(data, dict):
        data = data.get("params", [])
    if not data:
        raise InputError(f"{path}: no domain parameters")
    return [DomainParams.from_dict(d) for d in data]


def _gamma(args, K):
    if args.gamma is None:
        return None
    g = _floats(args.gamma)
    if len(g) != K:
        raise InputError(f"--gamma has {len(g)} entries, expected {K}")
    return g


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_plan(path):
    return make_plan(_read_json(path))


def cmd_plan(args) -> int:
    config = _read_json(args.config)
    if args.ratios:
        config["perturbation_ratios"] = _floats(args.ratios)
    if args.unit_n is not None:
        config["unit_sample_n"] = _tokens(args.unit_n)
    if args.budget is not None:
        config["budget_n0"] = _tokens(args.budget)
    if args.seed is not None:
        config["seed"] = args.seed
    plan = make_plan(config)
    out = _out(args)
    write_json(out / "plan.json", plan.to_dict())
    mdir = out / "manifests"
    mdir.mkdir(exist_ok=True)
    specs = emit_run_manifests(plan)
    for s in specs:
        write_json(mdir / f"{s.run_id}.json", s.to_dict(plan))
    logger.info("wrote plan.json and %d manifests to %s", len(specs), out)
    return EXIT_OK


def _fit_options(args) -> FitOptions:
    if not args.delta > 0:
        raise InputError(f"--delta must be > 0, got {args.delta}")
    return FitOptions(delta=args.delta)


def cmd_fit(args) -> int:
    options = _fit_options(args)
    with open(args.losses, encoding="utf-8") as fh:
        header = fh.readline()
    if "run_id" in header:
        if not args.plan:
            raise InputError("a run_id,domain,loss file needs --plan")
        groups = ingest_losses(_load_plan(args.plan), args.losses).groups
    else:
        groups = read_observations_csv(args.losses)
    results, errors = fit_all_domains(groups, options)
    if errors:
        raise InputError("; ".join(f"{k}: {v}" for k, v in errors.items()))
    write_json(_out(args) / "params.json", [r.to_dict() for r in results])
    return EXIT_OK if all(r.converged for r in results) else EXIT_NONCONVERGED


def cmd_optimize(args) -> int:
    params = load_params(args.params)
    n0 = _tokens(args.budget)
    if n0 <= 0:
        raise InputError(f"--budget must be positive, got {args.budget}")
    gamma = _gamma(args, len(params))
    rep = optimize_weights(params, n0, gamma)
    g = gamma if gamma is not None else [1.0] * len(params)
    write_json(_out(args) / "weights.json", rep.to_dict(params, n0, g))
    return EXIT_OK if rep.converged else EXIT_NONCONVERGED


def _sweep_artifacts(out, params, budgets, gamma):
    sweep = budget_sweep(params, budgets, gamma)
    names = [p.name for p in params]
    _write_csv(out / "sweep.csv", ["budget", *names],
               [[b, *(repr(float(w)) for w in rep.weights)] for b, rep in sweep])
    series = {n: [float(rep.weights[i]) for _, rep in sweep] for i, n in enumerate(names)}
    labels = [f"{b / 1e6:g}M" for b in budgets]
    (out / "weights_vs_budget.svg").write_text(
        line_plot(budgets, series, title="Optimal weights across data budgets", xlabel="budget (tokens)",
                  ylabel="weight", xlog=True, xticklabels=labels), encoding="utf-8")
    diffs = sweep_differences(sweep)
    if diffs:
        logger.info("successive L-inf weight changes: %s", ", ".join(f"{d:.4g}" for d in diffs))
    return sweep


def cmd_sweep(args) -> int:
    params = load_params(args.params)
    budgets = _budgets(args.budgets)
    if not budgets or min(budgets) <= 0:
        raise InputError("--budgets must list positive token counts")
    sweep = _sweep_artifacts(_out(args), params, budgets, _gamma(args, len(params)))
    return EXIT_OK if all(r.converged for _, r in sweep) else EXIT_NONCONVERGED


def _grid_artifacts(out, params, n0, gamma, levels, marker=None):
    rows = grid_search(params, n0, gamma, levels)
    names = [p.name for p in params]
    _write_csv(out / "grid.csv", [*names, "objective"],
               [[*(repr(float(x)) for x in w), repr(float(f))] for w, f in rows])
    if len(params) == 3:
        pts = [(float(w[0]), float(w[1]), float(f)) for w, f in rows]
        (out / "surface.svg").write_text(
            simplex_surface(pts, title=f"Predicted loss over mixtures, budget {n0 / 1e6:g}M",
                            xlabel=f"{names[0]} weight", ylabel=f"{names[1]} weight", marker=marker),
            encoding="utf-8")
    else:
        logger.warning("surface.svg needs exactly 3 domains (got %d); wrote grid.csv only", len(params))
    return rows


def cmd_grid(args) -> int:
    params = load_params(args.params)
    n0 = _tokens(args.budget)
    if n0 <= 0:
        raise InputError("--budget must be positive")
    levels = _floats(args.levels) if args.levels else PAPER_GRID_LEVELS
    gamma = _gamma(args, len(params))
    rep = optimize_weights(params, n0, gamma)
    _grid_artifacts(_out(args), params, n0, gamma, levels, marker=tuple(rep.weights[:2]))
    return EXIT_OK


def cmd_simulate(args) -> int:
    truth = GroundTruth.from_dict(_read_json(args.truth))
    if args.noise is not None:
        truth = GroundTruth(truth.params, args.noise, truth.seed)
    if args.seed is not None:
        truth = GroundTruth(truth.params, truth.noise_sigma, args.seed)
    plan = _load_plan(args.plan)
    if args.manifests:
        specs = [SamplingSpec.from_dict(_read_json(p)) for p in sorted(Path(args.manifests).glob("*.json"))]
    else:
        specs = emit_run_manifests(plan)
    write_losses_csv(_out(args) / "losses.csv", simulate_losses(truth, specs))
    return EXIT_OK


def cmd_recover(args) -> int:
    truth = GroundTruth.from_dict(_read_json(args.truth))
    if args.noise is not None:
        truth = GroundTruth(truth.params, args.noise, truth.seed)
    if args.seed is not None:
        truth = GroundTruth(truth.params, truth.noise_sigma, args.seed)
    plan = _load_plan(args.plan)
    budgets = _budgets(args.budgets) if args.budgets else [plan.budget_n0]
    rep = recovery_experiment(truth, plan, budgets, _gamma(args, plan.K))
    write_json(_out(args) / "recovery_report.json", rep.to_dict())
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out(args)
    if args.plan and args.losses:
        plan = _load_plan(args.plan)
        budgets = _budgets(args.budgets) if args.budgets else [plan.budget_n0]
        report = run_pipeline(plan, args.losses, budgets, _gamma(args, plan.K), FitOptions(delta=args.delta))
        write_json(out / "pipeline_report.json", report.to_dict())
        write_json(out / "params.json", [f.to_dict() for f in report.fits])
        params, n0, gamma = report.params, plan.budget_n0, report.gamma
        converged = all(f.converged for f in report.fits)
    elif args.params:
        params = load_params(args.params)
        if args.budget is None:
            raise InputError("report from params.json needs --budget")
        n0 = _tokens(args.budget)
        budgets = _budgets(args.budgets) if args.budgets else [n0]
        gamma = _gamma(args, len(params))
        converged = True
    else:
        raise InputError("report needs --plan and --losses, or --params")
    if n0 <= 0:
        raise InputError("budget must be positive")
    rep = optimize_weights(params, n0, gamma)
    write_json(out / "weights.json", rep.to_dict(params, n0, gamma if gamma is not None else [1.0] * len(params)))
    sweep = _sweep_artifacts(out, params, budgets, gamma)
    _grid_artifacts(out, params, n0, gamma, PAPER_GRID_LEVELS, marker=tuple(rep.weights[:2]))
    converged = converged and rep.converged and all(r.converged for _, r in sweep)
    return EXIT_OK if converged else EXIT_NONCONVERGED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random stream")
    common.add_argument("--out-dir", default=".", help="directory for outputs (default: cwd)")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mixopt",
                                     description="Fit per-domain loss models and optimise SFT data-mixture weights.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="write plan.json and per-run sampling manifests")
    p.add_argument("--config", required=True)
    p.add_argument("--ratios", help="comma-separated perturbation ratios, fractions allowed (e.g. 1/3,1/2,2,3)")
    p.add_argument("--unit-n", help="unit sample size N (tokens, split N/K per domain)")
    p.add_argument("--budget", help="final data budget N0 in tokens")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("fit", parents=[common], help="fit loss-model parameters -> params.json")
    p.add_argument("--losses", required=True, help="run_id,domain,loss CSV (with --plan) or an observations CSV")
    p.add_argument("--plan")
    p.add_argument("--delta", type=float, default=1e-3, help="Huber threshold (default 0.001)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("optimize", parents=[common], help="optimal weights at one budget -> weights.json")
    p.add_argument("--params", required=True)
    p.add_argument("--budget", required=True)
    p.add_argument("--gamma", help="comma-separated per-domain loss multipliers")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", parents=[common], help="weights across budgets -> sweep.csv, weights_vs_budget.svg")
    p.add_argument("--params", required=True)
    p.add_argument("--budgets", required=True, help="comma-separated increasing budgets")
    p.add_argument("--gamma")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grid", parents=[common], help="grid-search baseline -> grid.csv (+ surface.svg for K=3)")
    p.add_argument("--params", required=True)
    p.add_argument("--budget", required=True)
    p.add_argument("--levels", help="comma-separated weight levels (default 0.125..0.75)")
    p.add_argument("--gamma")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("simulate", parents=[common], help="synthetic losses.csv from truth.json")
    p.add_argument("--truth", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--manifests", help="directory of manifest JSON files (default: regenerate from the plan)")
    p.add_argument("--noise", type=float, help="override the truth's noise_sigma")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recover", parents=[common], help="simulate, refit and score -> recovery_report.json")
    p.add_argument("--truth", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--budgets")
    p.add_argument("--noise", type=float)
    p.add_argument("--gamma")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("report", parents=[common], help="full artifact bundle from a plan + losses or params")
    p.add_argument("--plan")
    p.add_argument("--losses")
    p.add_argument("--params")
    p.add_argument("--budget")
    p.add_argument("--budgets")
    p.add_argument("--gamma")
    p.add_argument("--delta", type=float, default=1e-3)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"mixopt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT if exc.stage in ("ingest", "fit") else EXIT_NONCONVERGED
    except (InputError, PlanError, FitError, ModelDomainError, ValueError, OSError, KeyError) as exc:
        print(f"mixopt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
