"""Exception hierarchy. Each class maps to one CLI exit code."""


class FuseletError(Exception):
    exit_code = 1


class ConfigError(FuseletError, ValueError):
    """Invalid or inconsistent pipeline configuration."""

    exit_code = 2


class DataError(FuseletError, ValueError):
    """Malformed input data, shape/dimension mismatch or empty overlap."""

    exit_code = 3


class NumericalError(FuseletError, ArithmeticError):
    """Training produced non-finite values."""

    exit_code = 4
