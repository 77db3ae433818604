"""Error categories shared by every module, each tied to a CLI exit code."""


class DeepVisageError(Exception):
    exit_code = 1


class ContractViolation(DeepVisageError, ValueError):
    """Shape, label or argument contract broken by the caller."""
    exit_code = 2


class UsageError(DeepVisageError):
    exit_code = 1


class DataError(DeepVisageError):
    exit_code = 2


class NumericalError(DeepVisageError):
    exit_code = 3
