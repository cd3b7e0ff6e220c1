"""Command line front end.

    sja run CONFIG.ini [--output-dir DIR]
    sja preset NAME [--override key=value ...] [--output-dir DIR] [--print-config]
    sja list-presets

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  The
number of worker processes comes from the ``SJA_WORKERS`` environment
variable (default 1).
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from .config import PRESETS, ConfigError, ExperimentConfig, preset
from .pipeline import WORKERS_ENV, RunAborted, run_experiment, worker_count

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _parse_overrides(items: List[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sja", description="Fidelity decay experiments from Jacobi rotation statistics.",
        epilog=f"Set {WORKERS_ENV}=n to run samples in n worker processes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("config", help="path to an INI config file")
    run.add_argument("--output-dir", help="override [experiment] output_dir")

    pre = sub.add_parser("preset", help="run a bundled preset")
    pre.add_argument("name", help="preset name, see list-presets")
    pre.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="replace one config value; repeatable")
    pre.add_argument("--output-dir", help="override [experiment] output_dir")
    pre.add_argument("--print-config", action="store_true",
                     help="print the resolved config and exit without running")

    sub.add_parser("list-presets", help="list bundled presets")
    return parser


def _execute(cfg: ExperimentConfig, output_dir: Optional[str]) -> int:
    workers = worker_count()
    manifest, run = run_experiment(cfg, output_dir, workers)
    print(f"wrote {len(manifest.outputs)} files to {output_dir or cfg.output_dir}")
    for key, value in sorted(run.summary.get("rates", {}).items()):
        print(f"  {key} = {value}")
    if manifest.failures:
        print(f"  {len(manifest.failures)} sample(s) failed; see manifest")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list-presets":
            for name in sorted(PRESETS):
                cfg = PRESETS[name]
                print(f"{name:8s} model={cfg.model} J={cfg.coupling:g} samples={cfg.n_samples}")
            return EXIT_OK
        if args.command == "run":
            cfg = ExperimentConfig.load(args.config)
        else:
            cfg = preset(args.name).with_overrides(_parse_overrides(args.override))
            if args.print_config:
                sys.stdout.write(cfg.to_ini())
                return EXIT_OK
        return _execute(cfg, args.output_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunAborted, ArithmeticError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
