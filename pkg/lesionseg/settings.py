## lesionseg/settings.py

"""
Process-level settings for lesionseg.

Values come from the environment (or a .env file next to manage.py) through
python-decouple. Per-run tunables live in RunConfig, see runconfig.py.
"""

import logging.config
import os
from pathlib import Path

from decouple import Csv, config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

DEFAULT_RUN_CONFIG = BASE_DIR / "config" / "lesionseg.conf"

LOG_LEVEL = config("LESIONSEG_LOG_LEVEL", default="INFO").upper()

LOG_FILE_PATH = config("LESIONSEG_LOG_FILE", default="")

# Long acceptance runs (500-iteration training, end-to-end quality) are opt-in.
SLOW_TESTS = config("LESIONSEG_SLOW_TESTS", default=False, cast=bool)

IMAGE_EXTENSIONS = config(
    "LESIONSEG_IMAGE_EXTENSIONS", default=".png,.jpg,.jpeg", cast=Csv()
)


def build_logging(level: str = LOG_LEVEL, log_file: str = LOG_FILE_PATH) -> dict:
    handlers = {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    }
    if log_file:
        handlers["file"] = {
            "level": "DEBUG",
            "class": "logging.FileHandler",
            "filename": os.fspath(log_file),
            "formatter": "verbose",
        }

    return {
        "version": 1,
        "disable_existing_loggers": False,
        "handlers": handlers,
        "formatters": {
            "verbose": {
                "format": "{asctime} {levelname} {module} {message}",
                "style": "{",
            },
        },
        "loggers": {
            "": {
                "handlers": list(handlers),
                "level": level.upper(),
                "propagate": True,
            },
        },
    }


LOGGING = build_logging()


def configure_logging(level: str = None):
    logging.config.dictConfig(build_logging(level) if level else LOGGING)
