import logging
from logging.handlers import TimedRotatingFileHandler
import os
import sys
from typing import Optional

FORMAT = '[%(asctime)s] %(levelname)s: %(message)s'
DATEFMT = '%Y-%m-%d %H:%M:%S'


def setup_logging(log_file: Optional[str] = None, level: str = "INFO"):
    logger = logging.getLogger()
    logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    # repeated calls (tests, several CLI invocations in one process) must not stack handlers
    for handler in list(logger.handlers):
        if getattr(handler, "_consistency_ft", False):
            logger.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(FORMAT, datefmt=DATEFMT)

    if log_file:
        os.makedirs(os.path.dirname(log_file), exist_ok=True) if os.path.dirname(log_file) else None
        handler = TimedRotatingFileHandler(log_file, when='W0', interval=1, backupCount=4)
        handler.setFormatter(formatter)
        handler._consistency_ft = True
        logger.addHandler(handler)

    # Console goes to stderr; stdout carries reports
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)
    console._consistency_ft = True
    logger.addHandler(console)

    return logger
