"""Exception types shared across the package.

The CLI maps these onto exit codes (see cli.py), so new error conditions
should reuse one of the classes below instead of raising bare ValueError.
"""


class MoesplatError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(MoesplatError):
    """A scalar/array argument violates its documented precondition."""


class InvalidInputError(MoesplatError):
    """Structured inputs are inconsistent (shape/count/resolution mismatch)."""


class InvalidSpecError(MoesplatError):
    """A scene or run specification fails validation."""


class StateError(MoesplatError):
    """An operation was called out of order (missing cache, unfrozen expert)."""


class NumericalError(MoesplatError):
    """Non-finite values were detected; carries diagnostics in args."""


class ConfigError(MoesplatError):
    """Run configuration could not be parsed or validated."""


class DataError(MoesplatError):
    """A dataset/checkpoint file is missing or malformed."""
