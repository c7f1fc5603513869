import hashlib
import logging
import logging.handlers
import os
import random

import numpy as np
import torch

from ckmplan.constants import OUTPUT_DIR_ENV

handler = None


def build_logger(logger_name, logger_filename):
    """Return a logger whose records also go to a daily rotated file in the output dir."""
    global handler

    formatter = logging.Formatter(
        fmt="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    # Set the format of root handlers
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO)
    logging.getLogger().handlers[0].setFormatter(formatter)

    logger = logging.getLogger(logger_name)
    logger.setLevel(logging.INFO)

    # Add a file handler shared by every logger of the package
    if handler is None:
        logdir = os.environ.get(OUTPUT_DIR_ENV, ".")
        os.makedirs(logdir, exist_ok=True)
        filename = os.path.join(logdir, logger_filename)
        handler = logging.handlers.TimedRotatingFileHandler(
            filename, when='D', utc=True, encoding='UTF-8')
        handler.setFormatter(formatter)
        package_logger = logging.getLogger("ckmplan")
        package_logger.setLevel(logging.INFO)
        package_logger.addHandler(handler)
        if not logger_name.startswith("ckmplan"):
            logger.addHandler(handler)

    return logger


def set_seed(seed: int) -> None:
    """Seed python, numpy and torch generators."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def sha256_file(path, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()
