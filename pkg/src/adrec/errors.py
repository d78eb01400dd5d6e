"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, IO errors -> 2,
DataError -> 3, NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed, empty, or otherwise unusable input data."""


class NumericError(ArithmeticError):
    """Non-finite values encountered where finite math was required."""
