"""Exception hierarchy. CLI exit codes key off these classes."""


class TamrlError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ShapeError(TamrlError, ValueError):
    pass


class ConfigError(TamrlError):
    pass


class DataError(TamrlError):
    pass


class NumericError(TamrlError, ArithmeticError):
    """NaN/Inf encountered in a gradient, loss or function evaluation."""

    exit_code = 2
