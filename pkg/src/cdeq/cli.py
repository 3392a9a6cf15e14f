"""Command-line entry point: ``cdeq <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 validation error (bad flags, config or missing
artifacts), 2 numerical failure.
"""

import argparse
import json
import logging
import sys

from . import harness
from .config import load_config
from .errors import NumericalError, ValidationError

COMMANDS = {
    "train-teacher": harness.run_train_teacher,
    "sample-traj": harness.run_sample_traj,
    "distill": harness.run_distill,
    "eval": harness.run_eval,
    "residuals": harness.run_residuals,
    "ablate-lambda": harness.run_ablate,
    "all": harness.run_all,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="cdeq", description="Consistency distillation of deep equilibrium models.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage in order")
        sp.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", default="runs/default", help="artifact and report directory")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        report = COMMANDS[args.command](cfg, args.out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if isinstance(diag, dict):
            print(json.dumps({k: v for k, v in diag.items() if isinstance(v, (int, float, str))}), file=sys.stderr)
        return 2
    summary = report["metrics"] if args.command != "all" else {k: r["metrics"] for k, r in report.items()}
    print(json.dumps(summary, indent=2, default=str)[:4000])
    return 0


if __name__ == "__main__":
    sys.exit(main())
