"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numerical 4).
"""


class AirgridError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(AirgridError):
    """Invalid configuration: unknown keys, bad values, missing required settings."""


class DataError(AirgridError):
    """Unusable input data: unreadable files, malformed headers, empty selections."""


class NumericalError(AirgridError):
    """Numerical failure: non-finite losses, gradients or predictions."""
