"""Command-line entry point: ``vhfl-lab <mode> --config <path> [--seed S --out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys

from .harness import MODES, ConfigError, load_config, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vhfl-lab",
        description="Run federated-training experiments, queue analysis, and bound sweeps.",
    )
    parser.add_argument("mode", choices=sorted(MODES), help="experiment family to run")
    parser.add_argument("--config", required=True, help="path to the JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="run a single seed instead of the configured list")
    parser.add_argument("--out", default=None, help="override the configured output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(
            args.config,
            mode_override=args.mode,
            seed_override=args.seed,
            out_override=args.out,
        )
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        created = run(config)
    except Exception as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 3
    for path in created:
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
