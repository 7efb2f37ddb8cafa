"""Command-line workbench: run experiments from JSON configs, summarize
artifact directories, list fixtures."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .fields import FIELD_CATALOG
from .runner import EXIT_CONFIG, ConfigError, run, summarize

ENV_WORKERS = "ROUGHDENSITY_WORKERS"


def _worker_count(flag_value) -> int:
    if flag_value is not None:
        return max(1, int(flag_value))
    env = os.environ.get(ENV_WORKERS)
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="roughdensity",
        description="Gaussian rough path workbench: covariance diagnostics, "
                    "Monte-Carlo density tails, small-noise rate functions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("--config", required=True, help="JSON config path")
    p_run.add_argument("--out", required=True, help="artifact directory")
    p_run.add_argument("--workers", type=int, default=None,
                       help=f"worker count (default: {ENV_WORKERS} or CPUs)")
    p_run.add_argument("--verbose", action="store_true")

    p_rep = sub.add_parser("report", help="summarize an artifact directory")
    p_rep.add_argument("artifact_dir")

    sub.add_parser("list-fixtures", help="show kernel and field catalogs")

    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            print(f"config error: {err}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            code = run(config, args.out, workers=_worker_count(args.workers))
        except ConfigError as err:
            print(f"config error: {err}", file=sys.stderr)
            return EXIT_CONFIG
        if args.verbose:
            print(summarize(args.out))
        return code

    if args.command == "report":
        try:
            print(summarize(args.artifact_dir))
        except FileNotFoundError as err:
            print(f"error: {err}", file=sys.stderr)
            return 1
        return 0

    if args.command == "list-fixtures":
        print("kernel families: fbm(H), bifbm(H,K), sum_fbm(H1,H2), "
              "stationary(F: power), fourier(C,k_max), fou(H,lam)")
        print("vector fields:", ", ".join(sorted(FIELD_CATALOG)))
        return 0

    return EXIT_CONFIG   # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
