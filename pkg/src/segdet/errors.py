"""Exception types shared across the package.

The CLI maps them onto exit codes: usage problems exit 1, data and format
problems exit 2, numerical failures exit 3.
"""


class SegdetError(Exception):
    """Base class for all package errors."""


class UsageError(SegdetError):
    """An API or command was called in a way it does not support."""


class DimensionError(SegdetError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class InputError(SegdetError, ValueError):
    """A value is outside the domain an operation accepts."""


class FormatError(SegdetError):
    """A file does not follow its on-disk layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(SegdetError):
    """Training produced a non-finite value."""
