"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: DataError -> 3, NumericError -> 4.
"""


class TrendwatchError(Exception):
    """Base class for all package errors."""


class DataError(TrendwatchError):
    """Bad or insufficient input data."""


class SchemaError(DataError):
    """A file is missing required columns or has a malformed header."""


class DuplicateObservationError(DataError):
    """More than one value for the same (region, stream, date)."""

    def __init__(self, offenders):
        self.offenders = list(offenders)
        preview = ", ".join(map(str, self.offenders[:5]))
        suffix = "" if len(self.offenders) <= 5 else f" (+{len(self.offenders) - 5} more)"
        super().__init__(f"duplicate observations: {preview}{suffix}")


class InsufficientHistoryError(DataError):
    """Not enough trailing observations to build the requested window."""


class WindowGapError(DataError):
    """A gap in the series exceeds what the gap policy allows."""


class TransportError(DataError):
    """HTTP fetch failed after all retries."""


class NumericError(TrendwatchError):
    """A numerical routine failed (degenerate input, no convergence where required)."""


class DegenerateDataError(NumericError):
    """Input admits no meaningful fit (e.g. an all-zero count window)."""
