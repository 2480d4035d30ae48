"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI uses when it escapes a
subcommand: 2 for I/O and file-format problems, 3 for numerical failures,
4 for validation errors. Usage errors (exit 1) are raised by argparse.
"""


class GlueError(Exception):
    exit_code = 4


class ValidationError(GlueError, ValueError):
    """Inputs violate a documented precondition."""

    exit_code = 4


class DimensionError(ValidationError):
    pass


class PatternError(ValidationError):
    """A matrix does not satisfy the requested N:M pattern."""


class TopologyError(ValidationError):
    pass


class StorageError(GlueError, OSError):
    """File could not be read or written."""

    exit_code = 2


class FormatError(StorageError):
    """Malformed or truncated GLUE container."""


class NumericError(GlueError, ArithmeticError):
    exit_code = 3


class ConvergenceError(NumericError):
    pass
