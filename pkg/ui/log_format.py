"""Console log rendering: timestamp, level glyph, message."""

import logging
import sys
from datetime import datetime
from typing import Optional

from .styles import ANSI_RESET, ansi

SUCCESS = logging.INFO + 5
logging.addLevelName(SUCCESS, "SUCCESS")

# level -> (glyph, palette key)
_LEVEL_STYLE = {
    logging.DEBUG: ("", 'text_tertiary'),
    logging.INFO: ("", 'text_secondary'),
    SUCCESS: ("✓ ", 'accent_green'),
    logging.WARNING: ("⚠ ", 'accent_orange'),
    logging.ERROR: ("✗ ", 'accent_red'),
    logging.CRITICAL: ("✗ ", 'accent_red'),
}


class ConsoleFormatter(logging.Formatter):
    """`HH:MM:SS  <glyph> message`, colored when writing to a terminal."""

    def __init__(self, color: bool = False):
        super().__init__()
        self.color = color

    def format(self, record: logging.LogRecord) -> str:
        level = max((lv for lv in _LEVEL_STYLE if lv <= record.levelno), default=logging.DEBUG)
        glyph, color_key = _LEVEL_STYLE[level]
        timestamp = datetime.fromtimestamp(record.created).strftime("%H:%M:%S")
        message = f"{glyph}{record.getMessage()}"
        if record.exc_info:
            message += "\n" + self.formatException(record.exc_info)
        if not self.color:
            return f"{timestamp}  {message}"
        return f"{ansi('text_tertiary')}{timestamp}{ANSI_RESET}  {ansi(color_key)}{message}{ANSI_RESET}"


def setup_logging(verbose: bool = False, log_file: Optional[str] = None) -> logging.Logger:
    """Install the console formatter (and an optional plain file log) on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(ConsoleFormatter(color=sys.stderr.isatty()))
    root.addHandler(console)
    if log_file:
        add_file_log(log_file)
    return root


def add_file_log(path: str) -> logging.Handler:
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def log_success(logger: logging.Logger, message: str, *args) -> None:
    logger.log(SUCCESS, message, *args)
