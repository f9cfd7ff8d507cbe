"""Command-line entry point: ``aca <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import AcaFitConfig
from .dataset import DEFAULT_GRID_NODES, DEFAULT_MIN_MEALS, IngestError, write_meals_csv
from .pipeline import SUBSETS, RunConfig, run_pipeline, run_stage
from .synth import generate_population, load_synth_spec
from .uncertainty import BootstrapConfig

log = logging.getLogger("aca")

STAGES = ("fit", "bootstrap", "marginal", "evaluate", "ranges")


def _lambda(text: str):
    """``0.03`` for every covariate, or ``carbs=0.1,fat=0.05`` per covariate."""
    if "=" not in text:
        return float(text)
    out = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        if not name.strip() or not value.strip():
            raise argparse.ArgumentTypeError(f"bad per-covariate lambda {part!r}")
        out[name.strip()] = float(value)
    return out


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _pipeline_options(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="meal-log CSV")
    src.add_argument("--synth", type=Path, metavar="SPECFILE", help="JSON synthetic-population spec")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--components", type=int, default=AcaFitConfig.d, help="ACA components d (default %(default)s)")
    p.add_argument("--lambda", dest="lam", type=_lambda, default=AcaFitConfig.lam,
                   help="penalty strength, one value or name=value pairs (default %(default)s)")
    p.add_argument("--penalty-order", type=int, choices=(1, 2), default=AcaFitConfig.penalty_order,
                   help="difference order of the smoothness penalty (default %(default)s)")
    p.add_argument("--n-init", type=int, default=AcaFitConfig.n_init, help="random starts per fit (default %(default)s)")
    p.add_argument("--max-sweeps", type=int, default=AcaFitConfig.max_sweeps)
    p.add_argument("--tol", type=float, default=AcaFitConfig.tol)
    p.add_argument("--grid-nodes", type=int, default=DEFAULT_GRID_NODES)
    p.add_argument("--bootstrap-iters", type=int, default=BootstrapConfig.iterations)
    p.add_argument("--bootstrap-size", type=int, default=BootstrapConfig.sample_size)
    p.add_argument("--level", type=float, default=BootstrapConfig.level)
    p.add_argument("--min-meals", type=int, default=DEFAULT_MIN_MEALS)
    p.add_argument("--threshold", type=float, action="append", default=[],
                   help="BG-impact threshold in mg/dl for range extraction (repeatable)")
    p.add_argument("--users", type=_csv_list, default=None, help="comma-separated user ids (default: all)")
    p.add_argument("--subsets", type=_csv_list, default=SUBSETS,
                   help="comma-separated subsets: all and/or meal types (default %(default)s)")
    p.add_argument("--eval-points", type=int, default=None,
                   help="points per curve, evenly spaced over the grid (default: the grid nodes)")
    p.add_argument("--bend-threshold", type=float, default=10.0, help="degrees (default %(default)s)")
    p.add_argument("--no-meal-type", action="store_true", help="leave meal_type out of pooled fits")
    p.add_argument("--jobs", type=int, default=1, help="concurrent bootstrap replicas (default %(default)s)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aca", description="Attributable components analysis of meal/BG logs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline: fit, bootstrap, curves, metrics, ranges")
    _pipeline_options(p)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage against an output directory")
        _pipeline_options(p)

    p = sub.add_parser("synth", help="write a synthetic meal-log CSV")
    p.add_argument("--synth", type=Path, required=True, metavar="SPECFILE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    fit = AcaFitConfig(
        d=args.components,
        lam=args.lam,
        max_sweeps=args.max_sweeps,
        tol=args.tol,
        seed=args.seed,
        n_init=args.n_init,
        penalty_order=args.penalty_order,
    )
    boot = BootstrapConfig(args.bootstrap_iters, args.bootstrap_size, args.level, args.seed)
    return RunConfig(
        out=args.out,
        input=args.input,
        synth=args.synth,
        seed=args.seed,
        fit=fit,
        bootstrap=boot,
        grid_nodes=args.grid_nodes,
        min_meals=args.min_meals,
        users=args.users,
        subsets=tuple(args.subsets),
        eval_points=args.eval_points,
        thresholds=tuple(args.threshold),
        bend_threshold=args.bend_threshold,
        include_meal_type=not args.no_meal_type,
        jobs=args.jobs,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            records = generate_population(load_synth_spec(args.synth), args.seed)
            write_meals_csv(records, args.out)
            return 0
        config = config_from_args(args)
        if args.command == "run":
            run_log = run_pipeline(config)
            for s in run_log["skipped"]:
                print(f"skipped {s['user_id']} ({s['subset']}): {s['reason']}", file=sys.stderr)
        else:
            run_stage(args.command, config)
        return 0
    except IngestError as exc:
        print(f"aca: input error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"aca: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
