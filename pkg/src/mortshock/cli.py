"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import NumericalError, ValidationError
from .pipeline import STAGES, THREADS_ENV, run_pipeline
from .projection import export_scenarios
from .synthetic import write_fixture

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mortshock",
        description="Calibrate, simulate and value with the regime-switching mortality improvement model.",
        epilog=f"Set {THREADS_ENV} to use several threads inside a stage.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run pipeline stages")
    run.add_argument("--config", required=True, help="path to the JSON configuration")
    run.add_argument("--stages", default="all", help=f"comma-separated subset of {','.join(STAGES)} (default all)")

    export = sub.add_parser("export", help="export a scenario store")
    export.add_argument("--input", required=True, help="scenario store written by the project stage")
    export.add_argument("--format", required=True, help="csv or quantile-summary")
    export.add_argument("--output", help="target file (default next to the input)")

    fixture = sub.add_parser("make-fixture", help="write a synthetic multi-country data set and config")
    fixture.add_argument("--output", required=True, help="directory for the CSVs and config.json")
    fixture.add_argument("--seed", type=int, default=0)
    fixture.add_argument("--n-ages", type=int, default=10)
    fixture.add_argument("--n-years", type=int, default=40)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            done = run_pipeline(cfg, args.stages)
            print(f"completed stages: {', '.join(done)} -> {cfg.out_path}")
        elif args.command == "export":
            target = export_scenarios(args.input, args.format, args.output)
            print(target)
        elif args.command == "make-fixture":
            out = write_fixture(args.output, args.seed, n_ages=args.n_ages, n_years=args.n_years)
            print(out / "config.json")
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
