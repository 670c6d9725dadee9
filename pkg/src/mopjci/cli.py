"""Command-line entry point: ``mopjci {gen-data,run,sweep,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import RngStream, write_dataset_csv
from .datagen import VARIANTS, ResponseSurfaceSpec, SyntheticSpec, gen_response_surface, gen_synthetic, load_covariates
from .runner import SWEEP_PARAMS, ExperimentPlan, default_plan, report_dir, run_experiment, sweep


def _parser():
    p = argparse.ArgumentParser(prog="mopjci", description="Joint conformal ITE intervals and subgroup discovery.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a generated dataset as CSV")
    g.add_argument("--out", required=True, help="output directory (synthetic) or CSV file (response surface)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--variant", choices=VARIANTS, default="uncorrelated")
    g.add_argument("--n-train", type=int, default=300)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--noise-sd", type=float, default=0.1)
    g.add_argument("--covariates", help="covariate CSV for a response-surface dataset")
    g.add_argument("--surface", help="response-surface spec JSON (with --covariates)")

    r = sub.add_parser("run", help="run an experiment plan")
    _plan_args(r)

    s = sub.add_parser("sweep", help="run a plan once per value of one parameter")
    _plan_args(s)
    s.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    s.add_argument("--values", required=True, help="comma-separated values")

    rep = sub.add_parser("report", help="subgroup tables of a finished experiment directory")
    rep.add_argument("exp_dir")
    rep.add_argument("--out", help="CSV path (default: stdout)")
    return p


def _plan_args(p):
    p.add_argument("--config", help="plan JSON (default: synthetic plan with all four methods)")
    p.add_argument("--out", required=True, help="output root directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, help="override the plan's seed")
    p.add_argument("--n-runs", type=int, help="override the plan's number of runs")


def _load_plan(args) -> ExperimentPlan:
    plan = ExperimentPlan.from_json(args.config) if args.config else default_plan()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n_runs is not None:
        changes["n_runs"] = args.n_runs
    return plan.with_config(**changes) if changes else plan


def _gen_data(args):
    if args.covariates or args.surface:
        if not (args.covariates and args.surface):
            raise SystemExit("--covariates and --surface go together")
        ds = gen_response_surface(load_covariates(args.covariates), ResponseSurfaceSpec.from_json(args.surface),
                                  RngStream(args.seed))
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_dataset_csv(ds, args.out)
        return 0
    spec = SyntheticSpec(args.n_train, args.n_test, args.variant, args.noise_sd, args.seed)
    train, test = gen_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(train, out / "train.csv")
    write_dataset_csv(test, out / "test.csv")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-data":
            return _gen_data(args)
        if args.command == "run":
            report = run_experiment(_load_plan(args), args.out, workers=args.workers)
            sys.stdout.write(report.summary_csv())
            if report.failures:
                print(f"{len(report.failures)} run(s) failed; see failures.log", file=sys.stderr)
                return 1
            return 0
        if args.command == "sweep":
            values = [v for v in args.values.split(",") if v.strip()]
            reports = sweep(_load_plan(args), args.param, values, args.out, workers=args.workers)
            failed = sum(len(r.failures) for r in reports.values())
            if failed:
                print(f"{failed} run(s) failed across the sweep", file=sys.stderr)
                return 1
            return 0
        if args.command == "report":
            text = report_dir(args.exp_dir)
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return 0
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
