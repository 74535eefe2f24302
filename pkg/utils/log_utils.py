import logging
import os

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(level=None, log_file=None):
    """Configure the root logger with a file handler and a stream handler.

    Defaults come from DSO_LOG_LEVEL and DSO_LOG_FILE.
    """
    level = (level or os.getenv("DSO_LOG_LEVEL", "INFO")).upper()
    log_file = log_file or os.getenv("DSO_LOG_FILE", "dso.log")
    numeric = getattr(logging, level, None)
    if not isinstance(numeric, int):
        raise ValueError(f"unknown log level {level!r}")
    handlers = [logging.StreamHandler()]
    if log_file:
        parent = os.path.dirname(os.path.abspath(log_file))
        os.makedirs(parent, exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(level=numeric, format=LOG_FORMAT, handlers=handlers, force=True)
    return logging.getLogger()
