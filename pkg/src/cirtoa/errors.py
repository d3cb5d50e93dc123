"""Exception hierarchy shared across the package."""


class CirToaError(Exception):
    """Base class for all errors raised by cirtoa."""


class ParameterError(CirToaError, ValueError):
    """An argument is outside its valid domain."""


class DegenerateTraceError(CirToaError, ValueError):
    """A trace cannot be processed, e.g. it is identically zero."""


class NoArrivalError(CirToaError):
    """An estimator found no sample satisfying its arrival condition."""


class ShapeError(CirToaError, ValueError):
    """Array shapes are inconsistent with a layer or model."""


class UsageError(CirToaError, RuntimeError):
    """An operation was called in the wrong state."""


class DatasetError(CirToaError):
    """Records are missing, malformed or do not fit a split policy."""


class RecordFormatError(DatasetError):
    """A record file line violates the record schema.

    ``lines`` holds the 1-based line (or row) numbers that were rejected.
    """

    def __init__(self, message, lines=()):
        super().__init__(message)
        self.lines = list(lines)
