"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 failed bound check.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .harness import ConfigError, check_bounds, dump_config, format_bound_table, gated, load_config, run_experiment
from .plots import emit_plots

EXIT_OK, EXIT_USAGE, EXIT_BOUNDS = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for failed bound checks here
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rcpo", description="Robust constrained policy optimization experiments on tabular CMDPs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")
    sub = parser.add_subparsers(dest="command", metavar="{run,plot,check-bounds,validate}", parser_class=_Parser)
    run = sub.add_parser("run", help="run an experiment from a TOML config")
    run.add_argument("config")
    run.add_argument("--eval-every", type=int, default=None, metavar="K", help="record robust evaluations every K iterations")
    run.add_argument("--no-plots", action="store_true", help="skip SVG output")
    plot = sub.add_parser("plot", help="render SVG plots from a run directory")
    plot.add_argument("dir")
    check = sub.add_parser("check-bounds", help="re-verify the per-iteration bound checks recorded in a trace")
    check.add_argument("dir")
    check.add_argument("--delta", type=float, default=None, help="trust-region radius (default: from config_echo.toml)")
    validate = sub.add_parser("validate", help="parse a config and print it fully resolved")
    validate.add_argument("config")
    return parser


def _run(args) -> int:
    config = load_config(args.config)
    if args.eval_every is not None:
        if args.eval_every < 1:
            raise UsageError("--eval-every must be >= 1")
        config = replace(config, eval_every=args.eval_every)
    if args.no_plots:
        config = replace(config, emit_plots=False)
    out = run_experiment(config)
    print(f"wrote {out / 'trace.csv'}, {out / 'summary.csv'}, {out / 'config_echo.toml'}")
    return EXIT_OK


def _check(args) -> int:
    tallies = check_bounds(args.dir, args.delta)
    print(format_bound_table(tallies))
    return EXIT_OK if gated(tallies) else EXIT_BOUNDS


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "rcpo: error: a subcommand is required")
        logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
        if args.command == "run":
            return _run(args)
        if args.command == "plot":
            for path in emit_plots(args.dir):
                print(path)
            return EXIT_OK
        if args.command == "check-bounds":
            return _check(args)
        print(dump_config(load_config(args.config)), end="")
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
