"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes, so library code should raise the
most specific class that applies.
"""

from __future__ import annotations


class HsidentError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(HsidentError, ValueError):
    """Invalid configuration or arguments."""

    exit_code = 1


class DataError(HsidentError, ValueError):
    """Malformed, inconsistent or insufficient input data."""

    exit_code = 2


class NumericalError(HsidentError, ArithmeticError):
    """Non-finite loss or gradient during training."""

    exit_code = 3
