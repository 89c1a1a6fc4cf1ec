"""Exception hierarchy shared by the library and the command line."""


class ChreodeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(ChreodeError, ValueError):
    exit_code = 2


class DataError(ChreodeError, ValueError):
    exit_code = 3


class DatasetFormatError(DataError):
    """A dataset file is truncated, malformed, or of an unknown version."""


class NumericalError(ChreodeError, ArithmeticError):
    """A non-finite value appeared in a forward or backward pass.

    ``provenance`` names the operation (or model component) where the
    first non-finite value was observed.
    """

    exit_code = 4

    def __init__(self, message, provenance=None):
        super().__init__(message)
        self.provenance = provenance


class UnsupportedOperationError(ChreodeError, TypeError):
    def __init__(self, operation):
        super().__init__(f"unsupported operation in differentiated function: {operation}")
        self.operation = operation
