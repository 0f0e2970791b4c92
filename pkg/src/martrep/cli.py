"""Command line entry point: ``martrep run`` and ``martrep verify``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .harness import ExperimentConfig, run, verify

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="martrep",
                                description="Martingale representation stability experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment and write report.json and convergence.csv")
    r.add_argument("--config", required=True, help="JSON experiment config")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, help="override the master seed")
    r.add_argument("--replications", type=int, help="override the replication count")
    v = sub.add_parser("verify", help="recompute the exact values of a written report")
    v.add_argument("--out", required=True, help="directory holding report.json")
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        if args.command == "run":
            cfg = ExperimentConfig.load(args.config)
            changes = {"output_dir": args.out}
            if args.seed is not None:
                changes["seed"] = args.seed
            if args.replications is not None:
                changes["replications"] = args.replications
            cfg = dataclasses.replace(cfg, **changes)
            report = run(cfg)
            for msg in report.violations:
                print(f"invariant violation: {msg}", file=sys.stderr)
            print(f"wrote {args.out}/report.json and {args.out}/convergence.csv")
            return EXIT_INVARIANT if report.violations else EXIT_OK
        problems = verify(args.out)
        for msg in problems:
            print(f"verify: {msg}", file=sys.stderr)
        if problems:
            return EXIT_INVARIANT
        print("all exact values reproduce")
        return EXIT_OK
    except (OSError, ValueError, TypeError, KeyError, json.JSONDecodeError) as e:
        print(f"martrep: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
