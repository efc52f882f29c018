import logging
import sys

from utils.config import settings

def setup_logger():
    logger = logging.getLogger('hashalloc')
    logger.setLevel(getattr(logging, settings.log_level, logging.INFO))
    logger.propagate = False  # Prevent duplicate logs
    if logger.handlers:
        return logger

    # Console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s'
    ))
    logger.addHandler(console_handler)

    # File handler, disabled with HASHALLOC_LOG_FILE=""
    if settings.log_file:
        file_handler = logging.FileHandler(settings.log_file)
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        ))
        logger.addHandler(file_handler)
    return logger

logger = setup_logger()
