"""Command-line entry point: ``fuselet <stage> --config pipeline.toml``."""

from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from fuselet import pipeline
from fuselet.config import load_config
from fuselet.errors import FuseletError

EXIT_OK = 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline TOML file")
    common.add_argument("--force", action="store_true", help="rerun even when outputs are up to date")
    common.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")
    common.add_argument("--seed", type=int, default=None, help="override every training seed")
    common.add_argument("--out", default=None, help="output directory (default: config, or $FUSELET_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fuselet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in pipeline.STAGES + ("run-all",):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "run-all" else "run every stage in order")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, output_dir=args.out, seed=args.seed, threads=args.threads)
        # BLAS stays single-threaded so numeric results do not depend on --threads
        with threadpool_limits(limits=1):
            if args.command == "run-all":
                status = pipeline.run_all(cfg, args.force)
            else:
                status = {args.command: pipeline.run_stage(args.command, cfg, args.force)}
    except FuseletError as exc:
        print(f"fuselet: error: {exc}", file=sys.stderr)
        return exc.exit_code
    for name, state in status.items():
        print(f"{name}: {state}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
