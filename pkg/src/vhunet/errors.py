"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numerical 4).
"""


class VhuNetError(Exception):
    """Base class for all package errors."""


class ConfigError(VhuNetError):
    """Invalid configuration: unknown keys, bad values, missing paths."""


class DataError(VhuNetError):
    """Malformed input data: bad containers, shape violations, unpaired files."""


class NumericalError(VhuNetError):
    """Numerical failure: NaN/Inf produced by an operation or diverged training."""
