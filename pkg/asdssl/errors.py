"""Error categories shared by the library and the CLI."""


class AsdError(Exception):
    """Base class for all errors raised on purpose by asdssl."""

    category = "error"
    exit_code = 1


class ConfigError(AsdError, ValueError):
    """Invalid configuration or command line usage."""

    category = "usage"
    exit_code = 2


class DataError(AsdError, ValueError):
    """Malformed or inconsistent input data."""

    category = "data"
    exit_code = 3


class NumericError(AsdError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    category = "numeric"
    exit_code = 4
