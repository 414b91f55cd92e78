"""Exception hierarchy shared by every module."""


class EMC2Error(Exception):
    """Base class for all package errors."""


class ConfigError(EMC2Error, ValueError):
    """Invalid configuration, shape mismatch or malformed dataset."""


class NumericError(EMC2Error, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DomainError(EMC2Error, ValueError):
    """Inputs fall outside the region where a bound is defined."""


class SizeError(EMC2Error, ValueError):
    """An exact enumeration was requested above its size guard."""


class ParseError(EMC2Error, ValueError):
    """A file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(EMC2Error):
    """A checkpoint failed validation on load."""
