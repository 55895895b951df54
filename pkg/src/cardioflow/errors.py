"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code: validation/config problems exit 2,
numeric failures exit 3, I/O and file-format problems exit 4.
"""


class CardioflowError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(CardioflowError):
    """A precondition or configured value is invalid."""

    exit_code = 2


class DimensionError(ValidationError):
    """Array shapes or extents do not satisfy an operation's contract."""


class ConfigError(ValidationError):
    """A config file or CLI argument cannot be interpreted."""


class TrainingError(CardioflowError):
    """Optimization produced a non-finite value or otherwise diverged."""

    exit_code = 3


class FormatError(CardioflowError):
    """A file on disk does not match its expected format."""

    exit_code = 4
