"""
Logging utilities for pagebook.
"""

import os
import sys
import time
from functools import wraps
from typing import Any, Dict, List, Optional

from loguru import logger

from config.settings import logging_config

CONSOLE_FORMAT = ("<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
                  "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>")
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None):
    """Console sink plus an optional rotating file sink; safe to call again with a new level."""
    logger.remove()
    level = (level or logging_config.log_level).upper()

    if logging_config.enable_console_logging:
        logger.add(sys.stderr, format=CONSOLE_FORMAT, level=level, colorize=True)

    path = logging_config.log_file if log_file is None else log_file
    if logging_config.enable_file_logging and path:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        logger.add(path, format=FILE_FORMAT, level=level, rotation="10 MB", retention="30 days", compression="zip")

    logger.debug(f"Logging at {level}" + (f" to {path}" if path else ""))


def get_logger(name: str):
    """Get a logger instance for a specific module."""
    return logger.bind(name=name)


def log_performance(func):
    """Log wall time of a long run (grid, ablation, method comparison)."""
    @wraps(func)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        try:
            result = func(*args, **kwargs)
        except Exception as e:
            logger.error(f"{func.__name__} failed after {time.perf_counter() - start:.2f}s: {e}")
            raise
        logger.info(f"{func.__name__} finished in {time.perf_counter() - start:.2f}s")
        return result
    return wrapper


class ProbeLogger:
    """Logger for one probe's tool loop."""

    def __init__(self, conv_id: str, probe_id: str):
        self.tag = f"[{conv_id}/{probe_id}]"
        self.logger = logger.bind(conv_id=conv_id, probe_id=probe_id)

    def log_tool_call(self, name: str, arguments: Dict[str, Any]):
        self.logger.debug(f"{self.tag} tool {name}({arguments})")

    def log_recall(self, page_ids: List[int], errors: List[str]):
        self.logger.debug(f"{self.tag} recall {page_ids}" + (f" errors={errors}" if errors else ""))

    def log_answer(self, answer: str, llm_calls: int, truncated: bool = False):
        short = answer if len(answer) <= 100 else answer[:100] + "..."
        self.logger.debug(f"{self.tag} answer after {llm_calls} call(s){' (truncated)' if truncated else ''}: {short}")

    def log_score(self, judge: str, score: Optional[int]):
        self.logger.debug(f"{self.tag} judge {judge} -> {score}")


# Initialize logging on module import
setup_logging()
