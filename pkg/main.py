# main.py
import argparse
import logging
import sys
from typing import List, Optional

from core.errors import EXIT_BAD_INPUT, SdeError, exit_code_for
from modules.commands import COMMANDS
from utils.context_utils import DEFAULT_CONFIG, apply_overrides, load_config

logger = logging.getLogger("main")

HELP = {
    "fit": "fit the model and write the fit artifact",
    "simulate": "simulate series from given parameters or from a fit",
    "band": "pointwise / simultaneous bands for configured targets",
    "ppc": "posterior predictive check with dive statistics",
    "sim-study": "run the simulation study",
    "smooth-track": "smoothed positions of a measurement-error model",
    "summary": "per-animal data summary",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vcsde",
        description="Varying-coefficient SDE models for animal movement and dive data",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_CONFIG, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=None, help="master seed (required for stochastic commands)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker processes")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
    )
    try:
        cfg = apply_overrides(load_config(args.config), seed=args.seed, out=args.out, threads=args.threads)
        return COMMANDS[args.command](cfg)
    except SdeError as e:
        code = exit_code_for(e)
        logger.error("%s failed: %s", args.command, e)
        return code
    except FileNotFoundError as e:
        logger.error("%s", e)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
