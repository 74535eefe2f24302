"""
Command-line entry point.

    python app.py grad-check --config configs/canonical_gradcheck.json
    python app.py optimize   --config configs/canonical_exact_gd.json --out results/run1
    python app.py equiv      --pair smdp-dmdp --seed 3
    python app.py zlearn     --config configs/gridworld_zlearn.json

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 runtime error.
"""

import argparse
import logging
import sys

import numpy as np
from dotenv import load_dotenv

from dso.errors import ConfigError, DsoError
from harness.config import load_config
from harness.runner import EQUIV_PAIRS, run_equivcheck, run_gradcheck, run_optimize, run_zlearn
from utils.log_utils import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Dynamical system optimization experiments.")
    parser.add_argument("--log-level", default=None, help="Logging level (default: DSO_LOG_LEVEL or INFO).")
    parser.add_argument("--log-file", default=None, help="Log file (default: DSO_LOG_FILE or dso.log).")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (("grad-check", "Compare exact gradients with finite differences."),
                       ("optimize", "Run the outer optimization loop."),
                       ("zlearn", "Train Z on a gridworld and compare with the exact solve.")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="Path to the JSON experiment config.")
        p.add_argument("--out", default=None, help="Output directory (overrides the config).")
        p.add_argument("--seed", type=int, default=None, help="Seed (overrides the config).")
        p.add_argument("--threads", type=int, default=None, help="Rollout worker threads.")

    p = sub.add_parser("equiv", help="Check the MDP equivalence constructions on random instances.")
    p.add_argument("--pair", required=True, choices=EQUIV_PAIRS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--states", type=int, default=6)
    p.add_argument("--actions", type=int, default=3)
    p.add_argument("--out", default=None, help="Directory for report.json.")
    return parser


def _config(args):
    return load_config(args.config).with_overrides(seed=args.seed, out_dir=args.out, threads=args.threads)


def dispatch(args) -> int:
    if args.command == "grad-check":
        report = run_gradcheck(_config(args))
        return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED
    if args.command == "optimize":
        run_optimize(_config(args))
        return EXIT_OK
    if args.command == "zlearn":
        run_zlearn(_config(args))
        return EXIT_OK
    report = run_equivcheck(args.pair, args.seed, args.states, args.actions, args.out)
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        setup_logging(args.log_level, args.log_file)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return dispatch(args)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (DsoError, ArithmeticError, np.linalg.LinAlgError, ValueError) as e:
        logger.exception("run failed: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
