import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from lrtd import __version__
from lrtd.commands import calibration, common_parser, data, evaluation, reports, theory, training
from lrtd.config import apply_thread_cap, get_settings
from lrtd.exceptions import LRTDError

logger = logging.getLogger(__name__)

COMMAND_MODULES = [data, training, calibration, evaluation, theory, reports]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrtd",
        description="Evidence-gated diffusion policy sampling with calibrated Type-I control",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True
    parents = [common_parser()]
    for module in COMMAND_MODULES:
        module.register(subparsers, parents)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)

    try:
        settings = get_settings()
    except (ValidationError, ValueError) as e:
        print(f"Invalid environment settings: {e}", file=sys.stderr)
        return 2

    # Configure logging
    logging.basicConfig(level=settings.log_level, format="%(levelname)s %(name)s: %(message)s")

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    args.argv = argv

    try:
        apply_thread_cap(settings)
        return args.handler(args)
    except ValidationError as e:
        logger.error(f"❌ Invalid configuration: {e}")
        return 2
    except LRTDError as e:
        logger.error(f"❌ {e.detail}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Unexpected error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(cli_main())
