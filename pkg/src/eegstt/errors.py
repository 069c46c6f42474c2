"""Exception types shared across the package.

Each carries the process exit code the CLI maps it to.
"""


class EEGSTTError(Exception):
    exit_code = 2


class ConfigError(EEGSTTError, ValueError):
    """Invalid configuration or argument combination."""

    exit_code = 2


class ShapeError(EEGSTTError, ValueError):
    exit_code = 2


class FormatError(EEGSTTError, ValueError):
    """Malformed on-disk file (bad magic, version, or payload length)."""

    exit_code = 2


class NumericError(EEGSTTError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""

    exit_code = 3
