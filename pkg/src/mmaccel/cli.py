"""Command-line entry point.

Subcommands map to the experiment runners:

* snapshot   — snapshot matching (moment / stress error tables)
* accelerate — full micro-macro acceleration vs microscopic reference
* reference  — plain microscopic reference run only
* converge   — deterministic convergence study

Exit codes: 0 success, 2 configuration error, 3 unrecoverable numerical
failure.
"""

from __future__ import annotations

import argparse
import sys

from .acceleration import UnrecoverableMatchingError
from .config import ConfigError, load_config
from .experiments import (run_acceleration_experiment, run_convergence_study,
                          run_reference_experiment, run_snapshot_matching)
from .matching import SolverFailureError
from .models import StagnationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_SUBCOMMAND_KINDS = {
    "snapshot": ("snapshot-matching", "moment-error-vs-L", "stress-error-vs-dt"),
    "accelerate": ("full-acceleration",),
    "reference": ("reference-run",),
    "converge": ("convergence-study",),
}

_RUNNERS = {
    "snapshot": run_snapshot_matching,
    "accelerate": run_acceleration_experiment,
    "reference": run_reference_experiment,
    "converge": run_convergence_study,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmaccel",
        description="Micro-macro accelerated particle simulation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMAND_KINDS:
        p = sub.add_parser(name, help=f"run a {name} experiment")
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override base seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes for replicates")
        p.add_argument("--replicates", type=int, default=None,
                       help="override replicate count")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = load_config(args.config)
        if args.seed is not None:
            spec.resolved["seed"] = int(args.seed)
        if args.replicates is not None:
            spec.resolved["replicates"] = int(args.replicates)
            if spec.resolved["replicates"] < 1:
                raise ConfigError("replicates: must be at least 1")
        allowed = _SUBCOMMAND_KINDS[args.command]
        if spec.kind not in allowed:
            raise ConfigError(
                f"kind: {spec.kind!r} does not belong to subcommand "
                f"{args.command!r} (expected one of {', '.join(allowed)})")
        if args.threads < 1:
            raise ConfigError("threads: must be at least 1")
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        _RUNNERS[args.command](spec, args.out, threads=args.threads)
    except (UnrecoverableMatchingError, SolverFailureError, StagnationError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
