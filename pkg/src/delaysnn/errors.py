"""Exception types raised across the package."""


class DelaySNNError(Exception):
    """Base class for all package errors."""


class ConfigError(DelaySNNError, ValueError):
    pass


class DimensionError(DelaySNNError, ValueError):
    pass


class NumericInputError(DelaySNNError, ValueError):
    pass


class KernelDegenerateError(DelaySNNError, ArithmeticError):
    pass


class GrowthExhaustedError(DelaySNNError, ValueError):
    pass


class TensorFormatError(DelaySNNError, ValueError):
    """Malformed tensor file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(DelaySNNError, ValueError):
    pass


class DegenerateFieldError(DelaySNNError, ValueError):
    pass


class StateError(DelaySNNError, RuntimeError):
    pass
