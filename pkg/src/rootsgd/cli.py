"""Command-line entry point: run, validate, and aggregate experiments.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.  The worker
count comes from ``ROOTSGD_WORKERS`` (default: available parallelism).
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .montecarlo import default_workers


def _cmd_run(args) -> int:
    try:
        cfg = harness.load_config(args.config)
        violations = harness.validate_config(cfg)
        if violations:
            for v in violations:
                print(f"invalid: {v}", file=sys.stderr)
            return 1
    except (harness.ConfigError, OSError) as e:
        print(f"invalid: {e}", file=sys.stderr)
        return 1
    try:
        out = harness.run_experiment(cfg, workers=default_workers())
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote results to {out}")
    return 0


def _cmd_validate(args) -> int:
    try:
        cfg = harness.load_config(args.config)
        violations = harness.validate_config(cfg)
    except (harness.ConfigError, OSError) as e:
        print(f"invalid: {e}", file=sys.stderr)
        return 1
    if violations:
        for v in violations:
            print(f"invalid: {v}", file=sys.stderr)
        return 1
    print("ok")
    return 0


def _cmd_report(args) -> int:
    try:
        out = harness.write_report(args.results_dir)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(out.read_text(), end="")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rootsgd", description="seeded Monte Carlo optimizer experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="validate and execute a config file")
    p_run.add_argument("config")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="check a config file")
    p_val.add_argument("config")
    p_val.set_defaults(func=_cmd_validate)

    p_rep = sub.add_parser("report", help="aggregate summary CSVs under a directory")
    p_rep.add_argument("results_dir")
    p_rep.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
