"""Command-line scenario runner: validate configs, run single simulations,
and sweep fleet or infrastructure parameters.

Exit codes: 0 success, 1 configuration error, 2 model error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import (ConfigError, SWEEPABLE_PARAMS, default_scenario_path,
                     validate_config)
from .engine import SimulationAborted
from .fleet import ModelError
from .simulation import run_scenario_path, sweep

LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MODEL = 2
EXIT_IO = 3


def _config_path(value: str) -> Path:
    if value == "default":
        return default_scenario_path()
    return Path(value)


def _parse_values(text: str) -> list:
    values = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            values.append(int(chunk))
        except ValueError:
            values.append(float(chunk))
    if not values:
        raise argparse.ArgumentTypeError("no values given")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evfleetsim",
        description=(
            "Deterministic discrete-event simulator for electric vehicle "
            "fleets and charging infrastructure. Pass 'default' as CONFIG "
            "to use the bundled scenario."
        ),
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a scenario file")
    p_validate.add_argument("config", type=_config_path)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("config", type=_config_path)
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
    p_run.add_argument("--out", type=Path, default=Path("out"),
                       help="output directory (default: ./out)")
    p_run.add_argument("--event-log", action="store_true",
                       help="also write the dispatched-event log CSV")

    p_sweep = sub.add_parser("sweep", help="run one scenario per parameter value")
    p_sweep.add_argument("config", type=_config_path)
    p_sweep.add_argument("--param", required=True, choices=SWEEPABLE_PARAMS)
    p_sweep.add_argument("--values", required=True, type=_parse_values,
                         help="comma-separated values, e.g. 100,90,80")
    p_sweep.add_argument("--out", type=Path, default=Path("sweep_out"))
    return parser


def cmd_validate(args) -> int:
    report = validate_config(args.config)
    if report.ok:
        print(f"OK: {args.config}")
        print(yaml.safe_dump(report.effective, sort_keys=False), end="")
        return EXIT_OK
    print(f"INVALID: {args.config}", file=sys.stderr)
    for error in report.errors:
        print(f"  - {error}", file=sys.stderr)
    return EXIT_CONFIG


def cmd_run(args) -> int:
    result = run_scenario_path(
        args.config, args.out, seed_override=args.seed, event_log=args.event_log
    )
    files = ", ".join(sorted(result.manifest["files"]))
    print(
        f"completed: {result.engine_summary.total_dispatched} events, "
        f"{len(result.trips)} trips, {result.n_stranded} stranded, "
        f"min_idle={result.min_idle}"
    )
    print(f"outputs in {result.out_dir}: {files}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    rows = sweep(args.config, args.param, args.values, args.out)
    print(f"{'value':>12} {'min_idle':>8} {'mean_wait_s':>12} {'stranded':>8}")
    for row in rows:
        print(f"{row['value']:>12} {row['min_idle']:>8} "
              f"{row['mean_wait_s']:>12.1f} {row['n_stranded']:>8}")
    print(f"aggregate written to {Path(args.out) / 'sweep.csv'}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationAborted, ModelError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
