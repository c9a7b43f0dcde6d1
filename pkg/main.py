"""Main entry point for the unite command line."""
import logging
import sys

from config import config
from unite.cli import LOG_FORMAT, main as cli_main

# Configure logging
logging.basicConfig(
    level=getattr(logging, config.LOG_LEVEL, logging.INFO),
    format=LOG_FORMAT,
)

logger = logging.getLogger(__name__)


def main() -> int:
    """Run one CLI command with banner logging."""
    if not config.validate():
        logger.warning(f"Invalid environment configuration (log level {config.LOG_LEVEL}, threads {config.THREADS})")
    logger.info("=" * 80)
    logger.info(f"unite {' '.join(sys.argv[1:])}")
    logger.info("=" * 80)
    code = cli_main()
    logger.info("=" * 80)
    logger.info(f"Finished with exit code {code}")
    logger.info("=" * 80)
    return code


if __name__ == "__main__":
    exit(main())
