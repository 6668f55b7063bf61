"""Exception hierarchy shared across the package."""


class MvPowerError(Exception):
    """Base class for all package errors."""


class ValidationError(MvPowerError, ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """A file cell or value could not be parsed."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class DimensionError(ValidationError):
    """Array or table shapes do not agree."""


class RankDeficiencyError(ValidationError):
    """Model matrix is not of full column rank."""


class NumericError(MvPowerError, RuntimeError):
    """A numerical routine failed or produced non-finite output."""


class ConvergenceError(NumericError):
    """An iterative estimator did not converge.

    ``trace`` holds the per-iteration objective values.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
