"""Command-line entry point ``mvsde``.

Exit codes: 0 when the experiment passes its acceptance window, 2 when it
runs but misses the window, 1 on any error (bad config, unknown key,
solver failure).
"""

from __future__ import annotations

import argparse
import sys

from .config import (EXPERIMENT_KINDS, ExperimentConfig, coerce_values,
                     parse_config_values, read_config_text)
from .errors import ConfigError, MVSDEError
from .experiments import DEFAULTS, run_experiment

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_WINDOW = 2


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mvsde",
        description="Simulate mean-field particle systems and measure error rates.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed (u64)")
        p.add_argument("--out", help="output directory for series.csv and report.json")
        p.add_argument("--threads", type=int, help="worker threads")
        if kind == "delta-rate":
            p.add_argument("--scheme", choices=["backward", "tamed", "adaptive"])
        if kind in ("contraction-check", "couple-check", "simulate"):
            p.add_argument("--model", help="gallery model name")
        if kind == "contraction-check":
            p.add_argument("--rmax", type=float, help="grid upper end (default 10 ell0)")
            p.add_argument("--grid", type=int, dest="n_grid", help="number of grid points")
        if kind == "couple-check":
            p.add_argument("--epsilon", type=float)
            p.add_argument("--inner-delta", type=float, dest="inner_delta")
            p.add_argument("--runs", type=int)
    return parser


def _load(args):
    """Kind defaults, then config-file values, then command-line flags."""
    flags = {k: getattr(args, k, None) for k in
             ("seed", "threads", "model", "rmax", "n_grid", "epsilon", "inner_delta",
              "runs", "scheme")}
    values = dict(DEFAULTS[args.command])
    if args.config is not None:
        file_values = parse_config_values(read_config_text(args.config))
        declared = file_values.pop("experiment", args.command)
        if declared != args.command:
            raise ConfigError(f"key 'experiment': config declares {declared!r} "
                              f"but the subcommand is {args.command!r}")
        values.update(file_values)
    values.update(coerce_values(flags))
    return ExperimentConfig(experiment=args.command, **values)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load(args)
        report = run_experiment(cfg, args.out)
    except (MVSDEError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(report.summary())
    return EXIT_PASS if report.passed else EXIT_WINDOW


if __name__ == "__main__":
    sys.exit(main())
