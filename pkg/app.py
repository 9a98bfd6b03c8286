import logging
import sys

import config
from cli.harness import harness

# Configure logging
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO)
)
logger = logging.getLogger(__name__)


def main(argv=None) -> int:
    logger.debug(f"running in {config.MODE} mode")
    return harness.run(argv)


if __name__ == '__main__':
    sys.exit(main())
