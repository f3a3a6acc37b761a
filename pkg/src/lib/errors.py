"""
Error types shared by every module.

Everything subclasses the builtin it behaves like, so callers that only
catch ValueError / ArithmeticError keep working.
"""


class GuidgError(Exception):
    """Base class for all library errors."""


class RejectedInputError(GuidgError, ValueError):
    """A precondition, shape or range check failed."""


class NumericError(GuidgError, ArithmeticError):
    """A value that must be finite was not."""


class ConfigError(RejectedInputError):
    """Experiment or bound configuration is invalid."""


class ReportWriteError(GuidgError, OSError):
    """The output directory or a report file could not be written."""
