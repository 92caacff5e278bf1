"""Command-line entry point.

Subcommands:
    run    — execute a single config of any job kind
    sweep  — grid and sweep-compare jobs
    verify — duality verification jobs

On failure a machine-readable error JSON is printed to stdout and the
exit status is nonzero (2 invalid config, 3 diverged run, 1 otherwise).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .config import load_config
from .errors import ConfigurationError, DivergenceError
from .harness import run_experiment


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to a TOML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output root directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priopt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in (("run", "execute a single experiment config"),
                        ("sweep", "run a weight-grid or sweep-compare job"),
                        ("verify", "run a duality verification job")):
        _add_common(sub.add_parser(name, help=blurb))
    return parser


_ALLOWED_JOBS = {"run": None, "sweep": ("grid", "sweep-compare"), "verify": ("duality",)}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        allowed = _ALLOWED_JOBS[args.command]
        if allowed is not None and config.job not in allowed:
            raise ConfigurationError(
                f"subcommand {args.command!r} handles jobs {allowed}, config says {config.job!r}")
        out = run_experiment(config, out_root=args.out)
    except ConfigurationError as exc:
        print(json.dumps({"error": {"type": "configuration", "message": str(exc)}}))
        return 2
    except DivergenceError as exc:
        print(json.dumps({"error": {"type": "diverged", "message": str(exc),
                                    "stage": exc.stage, "iteration": exc.iteration}}))
        return 3
    except FileNotFoundError as exc:
        print(json.dumps({"error": {"type": "io", "message": str(exc)}}))
        return 1
    print(json.dumps({"status": "ok", "out_dir": str(out)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
