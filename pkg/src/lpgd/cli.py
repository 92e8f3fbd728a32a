"""Command-line entry point: ``lpgd {envelope,sudoku,sweep,qp-bench}``.

Settings are resolved as built-in defaults < ``--config`` JSON file <
``LPGD_*`` environment variables < command-line flags.  Recognized
variables: ``LPGD_CONFIG``, ``LPGD_OUT``, ``LPGD_SEED``, ``LPGD_WORKERS``,
``LPGD_TOL``, ``LPGD_TIMING``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ConfigError
from .experiments import KINDS, load_config, run_experiment

ENV_PREFIX = "LPGD_"
_ENV_KEYS = ("out", "seed", "workers", "tol", "timing")

log = logging.getLogger("lpgd")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpgd", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="kind", required=True, metavar="{" + ",".join(KINDS) + "}")
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="parallel jobs for grid points")
        p.add_argument("--tol", type=float, help="solver tolerance")
        p.add_argument(
            "--no-timing", dest="timing", action="store_false", default=None,
            help="write nan in timing columns (byte-identical reruns)",
        )
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    return {k: environ[ENV_PREFIX + k.upper()] for k in _ENV_KEYS if ENV_PREFIX + k.upper() in environ}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = env_overrides()
    for key in _ENV_KEYS:
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    config_path = args.config or os.environ.get(ENV_PREFIX + "CONFIG")
    try:
        config = load_config(config_path, args.kind, overrides)
        log.info("running %s -> %s", config.kind, config.out)
        code = run_experiment(config)
    except ConfigError as err:
        print(f"lpgd: config error: {err}", file=sys.stderr)
        return 2
    if code:
        print(f"lpgd: {config.kind} run diverged, see {config.out}/summary.json", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
