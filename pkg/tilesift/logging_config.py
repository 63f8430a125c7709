import copy
import logging.config
from typing import Optional

LOGGING_CONFIG = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "default": {
            "format": "%(levelname)s %(asctime)s | %(name)s | %(message)s",
            "datefmt": "%Y-%m-%d %H:%M:%S",
        },
    },
    "handlers": {
        "default": {
            "formatter": "default",
            "class": "logging.StreamHandler",
            "stream": "ext://sys.stderr",
        },
        "file": {
            "formatter": "default",
            "class": "logging.handlers.RotatingFileHandler",
            "filename": "tilesift.log",
            "maxBytes": 100000,
            "backupCount": 3,
        },
    },
    "loggers": {
        "": {"handlers": ["default", "file"], "level": "INFO"},
    },
}


def configure_logging(level: str = "INFO", log_file: Optional[str] = "tilesift.log"):
    """Apply LOGGING_CONFIG with the given level; an empty log_file drops the file handler"""
    config = copy.deepcopy(LOGGING_CONFIG)
    config["loggers"][""]["level"] = level.upper()
    if log_file:
        config["handlers"]["file"]["filename"] = log_file
    else:
        del config["handlers"]["file"]
        config["loggers"][""]["handlers"] = ["default"]
    logging.config.dictConfig(config)
