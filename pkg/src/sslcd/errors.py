"""Exception types shared across the package.

The CLI maps each of these to a distinct process exit code.
"""


class SslcdError(Exception):
    exit_code = 1


class ConfigError(SslcdError, ValueError):
    """Invalid configuration or arguments."""

    exit_code = 2


class DataError(SslcdError, ValueError):
    """Missing, truncated or inconsistent input data."""

    exit_code = 3


class NumericalError(SslcdError, FloatingPointError):
    """A NaN/Inf appeared in a forward pass, loss or gradient."""

    exit_code = 4


class DegenerateInputError(SslcdError, ValueError):
    """Thresholding was asked to split a constant score map."""

    exit_code = 3
