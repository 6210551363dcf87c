"""Exception hierarchy shared by every module.

Each error class carries the process exit code the CLI reports for it.
"""


class Matryoshka3DError(Exception):
    exit_code = 1


class UsageError(Matryoshka3DError):
    """Caller misused an API (wrong call order, bad combination of flags)."""

    exit_code = 1


class ParameterError(UsageError, ValueError):
    """A scalar parameter is outside its allowed range."""


class DimensionError(UsageError, ValueError):
    """Tensor shapes do not line up."""


class ConfigurationError(UsageError):
    """A configuration is internally inconsistent."""


class DataError(Matryoshka3DError):
    exit_code = 2

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(Matryoshka3DError):
    """Checkpoint container is corrupt or from an unsupported version."""

    exit_code = 3


class NumericalError(Matryoshka3DError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, step=None, sweeps=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step
        self.sweeps = sweeps
