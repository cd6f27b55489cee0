import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from modules.config import load_config, with_overrides
from modules.errors import ConfigError, PhyDiffError
from modules.experiment import run_baseline, run_eval, run_train
from modules.selftest import run_selftest

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def configure_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else os.getenv("PHYDIFF_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=level
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phydiff",
        description="Conditional diffusion models for OFDM detection and phase-noise estimation."
    )
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a noise predictor and write a checkpoint")
    train.add_argument("--config", required=True, help="TOML run description")
    train.add_argument("--seed", type=int, default=None, help="override the master seed")
    train.add_argument("--out", default=None, help="override the output directory")
    train.add_argument("--plot", action="store_true", help="also write an SVG of the loss trace")

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint against the baselines")
    evaluate.add_argument("--config", required=True)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--seed", type=int, default=None)
    evaluate.add_argument("--out", default=None)
    evaluate.add_argument("--trace", action="store_true", help="record x̂0 at every reverse step")
    evaluate.add_argument("--plot", action="store_true", help="also write SVG charts")

    baseline = commands.add_parser("baseline", help="evaluate the classical baselines only")
    baseline.add_argument("--config", required=True)
    baseline.add_argument("--seed", type=int, default=None)
    baseline.add_argument("--out", default=None)
    baseline.add_argument("--plot", action="store_true")

    commands.add_parser("selftest", help="run the invariant checks and print the Gray tables")
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == "selftest":
        results = run_selftest()
        failed = [r.name for r in results if not r.passed]
        if failed:
            logger.error(f"Self-test failed: {', '.join(failed)}")
            return EXIT_RUNTIME
        logger.info(f"All {len(results)} self-test checks passed")
        return EXIT_OK

    config = with_overrides(load_config(args.config), seed=args.seed, output_dir=args.out)
    if args.command == "train":
        outputs = run_train(config, plot=args.plot)
    elif args.command == "eval":
        outputs = run_eval(config, args.checkpoint, trace=args.trace, plot=args.plot)
    else:
        outputs = run_baseline(config, plot=args.plot)
    for kind, path in outputs.files.items():
        logger.info(f"{kind}: {path}")
    return EXIT_OK


def main(argv=None) -> int:
    """Parse the command line, run it and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return run(args)
    except ConfigError as e:
        logger.error(f"Error in configuration: {e}")
        return EXIT_CONFIG
    except PhyDiffError as e:
        logger.error(f"Error in {args.command}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Error in {args.command}: {e}")
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
