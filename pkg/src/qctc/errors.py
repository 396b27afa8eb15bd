"""Exception types shared across the package.

Each maps to a distinct CLI exit code (see :mod:`qctc.cli`).
"""


class QCTCError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(QCTCError, ValueError):
    """Bad arguments, mismatched artifacts, or a violated precondition."""

    exit_code = 2


class InfeasibleAlignmentError(QCTCError, ValueError):
    """A target cannot be emitted in the available number of positions."""

    exit_code = 3

    def __init__(self, message, sample_index=None, required=None, available=None):
        super().__init__(message)
        self.sample_index = sample_index
        self.required = required
        self.available = available


class NumericalError(QCTCError, ArithmeticError):
    """Non-finite values where finite ones were required."""

    exit_code = 4
