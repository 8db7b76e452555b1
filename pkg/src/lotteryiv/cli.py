"""Command-line entry point.

Runs the full analysis on CSV inputs or on a synthetic draw and writes
``report.json``, ``tables.txt``, ``periods.csv``, and ``balance.csv`` to the
output directory. Exit codes: 0 on success, 1 for input problems, 2 for
estimation problems.
"""

from __future__ import annotations

import argparse
import sys

from .estimator import TrimRule
from .propensity import CovariateMode
from .report import RunConfig, StageError, run_analysis

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_ESTIMATION_ERROR = 2

#: Stages whose failures mean bad inputs rather than failed estimation.
_INPUT_STAGES = frozenset({"config", "generate", "load", "link"})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lotteryiv",
        description="IPW instrumental-variable effects of a residence-permit "
                    "lottery, with cluster-bootstrap inference.",
    )
    source = parser.add_argument_group("input (choose CSV files or a generator config)")
    source.add_argument("--lottery-csv", help="lottery participation records")
    source.add_argument("--employment-csv", help="annual employment records")
    source.add_argument("--dgp-config",
                        help="key-value file configuring the synthetic generator")
    parser.add_argument("--seed", type=int, default=1,
                        help="seed for generation and the bootstrap (default 1)")
    parser.add_argument("--covariates", choices=["year", "full"], default="year",
                        help="propensity covariates: year dummies only, or "
                             "plus demographics (default year)")
    parser.add_argument("--participation", type=int, choices=[1, 2, 3], default=1,
                        help="anchor the sample at the k-th participation (default 1)")
    parser.add_argument("--subgroup", choices=["all", "commuter", "non-commuter"],
                        default="all")
    parser.add_argument("--normalize", choices=["on", "off"], default="on",
                        help="normalize weights within instrument groups (default on)")
    parser.add_argument("--trim", default="0.05,0.95", metavar="LO,HI",
                        help="propensity-score trimming bounds (default 0.05,0.95)")
    parser.add_argument("--reps", type=int, default=1999,
                        help="bootstrap replications (default 1999)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="bootstrap worker threads (default 1)")
    parser.add_argument("--out", default="lotteryiv-out", metavar="DIR",
                        help="output directory (default lotteryiv-out)")
    return parser


def _parse_trim(text: str) -> TrimRule:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"--trim expects LO,HI, got {text!r}")
    return TrimRule(lo=float(parts[0]), hi=float(parts[1]))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_config = RunConfig(
            lottery_csv=args.lottery_csv,
            employment_csv=args.employment_csv,
            dgp_config=args.dgp_config,
            seed=args.seed,
            covariates=CovariateMode(args.covariates),
            participation=args.participation,
            subgroup=args.subgroup,
            normalize=args.normalize == "on",
            trim_rule=_parse_trim(args.trim),
            replications=args.reps,
            n_jobs=args.jobs,
            out_dir=args.out,
        )
    except ValueError as exc:
        print(f"lotteryiv: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR

    try:
        run_analysis(run_config)
    except StageError as exc:
        print(f"lotteryiv: error in {exc}", file=sys.stderr)
        if exc.stage in _INPUT_STAGES:
            return EXIT_INPUT_ERROR
        return EXIT_ESTIMATION_ERROR
    print(f"report written to {run_config.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
