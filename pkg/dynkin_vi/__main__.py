import platform
import sys

import numpy
import scipy

from dynkin_vi import app, log


def main(argv=None) -> int:
    logger = log.setup()
    logger.debug(f"numpy {numpy.__version__}, scipy {scipy.__version__}")
    logger.debug(f"Python version: {platform.python_version()}")
    logger.debug(f"Running on: {platform.system()} {platform.release()}")

    cli = app.DynkinVI()
    cli.load_commands()
    return cli.run(argv)


if __name__ == "__main__":
    sys.exit(main())
