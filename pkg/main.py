import sys
import logging
import argparse

from config import LOG_LEVEL, ConfigError

# feature modules
from synth import register_synth_commands
from sgm import register_sgm_commands
from trainer import register_trainer_commands
from metrics_dsm import register_metrics_commands

from autodiff import CheckpointError, NonFiniteError
from dataset import DatasetError
from utils import RasterFormatError

# -----------------------------
# Logging setup
# -----------------------------
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S"
)
logger = logging.getLogger(__name__)

# -----------------------------
# Exit codes
# -----------------------------
EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spsnerf",
        description="Sparse-view radiance fields supervised by low-resolution stereo depth priors",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Register feature modules
    register_synth_commands(subparsers)
    register_sgm_commands(subparsers)
    register_trainer_commands(subparsers)
    register_metrics_commands(subparsers)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        return args.handler(args)
    # format errors are ValueErrors too, so they go first
    except (RasterFormatError, CheckpointError, OSError) as exc:
        logger.error(f"{args.command}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DatasetError, ValueError) as exc:
        logger.error(f"{args.command}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        logger.error(f"{args.command}: {exc} (layer {exc.layer})")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
