"""Shared exception types.

Exit-code mapping lives in the CLI: ValidationError subtypes map to exit 2,
environment/IO failures map to exit 1.
"""

from __future__ import annotations


class IdawareError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(IdawareError, ValueError):
    """Malformed input data or an inconsistent configuration."""


class ConfigError(ValidationError):
    """Bad configuration value or unknown configuration key."""


class DimensionError(ValidationError):
    """Array shapes do not satisfy an operation's contract."""


class NumericError(IdawareError, ArithmeticError):
    """A numeric op produced a non-finite value, or training diverged."""


class CapacityError(ValidationError):
    """Combined image count exceeds the supported maximum."""


class AssemblyError(ValidationError):
    """A sample references image slots that do not exist."""


class EmptySupervisionError(ValidationError):
    """Loss requested over an empty supervision mask."""
