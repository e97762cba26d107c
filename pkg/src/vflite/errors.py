"""Exception types shared across the package.

The CLI maps these onto its exit codes: :class:`FormatError` and other
``ValueError`` subclasses are data errors (exit 2), :class:`NumericError`
is a numeric failure (exit 3).
"""


class VFLiteError(Exception):
    """Base class for package errors."""


class FormatError(VFLiteError, ValueError):
    """A file on disk does not match the expected binary or WAV layout."""


class TooShortError(VFLiteError, ValueError):
    """An input signal is shorter than the minimum the operation needs."""


class NumericError(VFLiteError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""
