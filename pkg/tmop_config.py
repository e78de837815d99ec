"""Centralised environment and logging helpers for the TMOP tools."""

import logging
import os
import sys
from datetime import datetime
from pathlib import Path

# Optional: .env support
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass


def get_log_dir() -> Path:
    """Return the log directory from TMOP_LOG_DIR (default: data/logs)."""
    return Path(os.environ.get("TMOP_LOG_DIR", "data/logs"))


def get_output_dir() -> Path:
    """Return the default run output directory from TMOP_OUTPUT_DIR (default: data/runs)."""
    return Path(os.environ.get("TMOP_OUTPUT_DIR", "data/runs"))


def get_console_level() -> int:
    level = os.environ.get("TMOP_LOG_LEVEL", "INFO").upper()
    return getattr(logging, level, logging.INFO)


def log_file_for(name: str) -> Path:
    return get_log_dir() / f"{name}_{datetime.now().strftime('%Y%m%d')}.log"


# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------
def setup_logging(name: str = "tmop") -> logging.Logger:
    """
    Attach a dated file handler and a stdout handler to the root logger.

    Library modules log through logging.getLogger(__name__), so everything
    below the root ends up in both places.  Safe to call repeatedly.
    """
    logger = logging.getLogger()
    if getattr(logger, "_tmop_configured", False):
        return logging.getLogger(name)
    logger.setLevel(logging.DEBUG)

    log_dir = get_log_dir()
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(log_file_for(name), encoding="utf-8")
        fh.setLevel(logging.DEBUG)
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)-7s %(message)s"))
        logger.addHandler(fh)
    except OSError:
        pass  # read-only working dir

    ch = logging.StreamHandler(sys.stdout)
    ch.setLevel(get_console_level())
    ch.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(ch)

    logger._tmop_configured = True
    return logging.getLogger(name)
