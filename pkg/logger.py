"""
Logging for the hitter workbench.

Every module logs through the root logger, which writes to the console and
to a rotating ``hitter.log`` shared by all runs. Training additionally copies
its records into ``train.log`` next to the run's checkpoint and ledger.
"""

import logging
import os
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from dotenv import load_dotenv

load_dotenv()

LOG_DIR = os.getenv("LOG_DIR", "logs")
LOG_FILE = os.path.join(LOG_DIR, "hitter.log")
RUN_LOG_NAME = "train.log"

os.makedirs(LOG_DIR, exist_ok=True)

logger = logging.getLogger()
logger.setLevel(os.getenv("LOG_LEVEL", "INFO").upper())

log_format = logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")

file_handler = RotatingFileHandler(LOG_FILE, maxBytes=5 * 1024 * 1024, backupCount=10)
file_handler.setFormatter(log_format)
logger.addHandler(file_handler)

console_handler = logging.StreamHandler()
console_handler.setFormatter(log_format)
logger.addHandler(console_handler)


def get_logger(name=None):
    """
    Get a module logger; records propagate to the root handlers.

    Args:
        name (str, optional): usually ``__name__`` of the calling module

    Returns:
        logging.Logger
    """
    if name:
        return logging.getLogger(name)
    return logger


def set_log_level(level):
    """Set the level of the root logger and every handler attached to it (``--verbose``)."""
    logger.setLevel(level)
    for handler in logger.handlers:
        handler.setLevel(level)


@contextmanager
def run_log(output_dir):
    """
    Copy all records into ``<output_dir>/train.log`` while the block runs.

    Yields:
        str: path of the run log
    """
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, RUN_LOG_NAME)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(log_format)
    handler.setLevel(logger.level)
    logger.addHandler(handler)
    try:
        yield path
    finally:
        logger.removeHandler(handler)
        handler.close()
