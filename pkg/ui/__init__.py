"""Presentation modules: palette, console log format, plots."""

from .styles import COLORS, PLOT_RC
from .log_format import SUCCESS, ConsoleFormatter, log_success, setup_logging

__all__ = ['COLORS', 'PLOT_RC', 'SUCCESS', 'ConsoleFormatter', 'log_success', 'setup_logging']
