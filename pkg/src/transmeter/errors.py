"""Exception types raised across the package."""


class TransmeterError(Exception):
    """Base class for all package errors."""


class ShapeError(TransmeterError, ValueError):
    pass


class InvalidArgumentError(TransmeterError, ValueError):
    pass


class StateError(TransmeterError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class DegenerateDataError(TransmeterError, ValueError):
    """Training data cannot support the requested fit (e.g. a single class)."""


class LoadError(TransmeterError):
    """A dataset, registry or checkpoint file could not be read."""


class UndefinedScoreError(TransmeterError, ZeroDivisionError):
    """Transferability is undefined because the baseline accuracy is zero."""


class InvalidBatchError(InvalidArgumentError):
    """Batch normalization cannot use batch statistics of a single row."""
