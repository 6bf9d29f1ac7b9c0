"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ``DataError`` -> 3,
``NumericError`` -> 4. Shape and argument problems inside the library raise
``ValueError`` subclasses so they read naturally to numpy users.
"""


class PeriodNetError(Exception):
    pass


class ShapeError(PeriodNetError, ValueError):
    pass


class GraphError(PeriodNetError, RuntimeError):
    """Misuse of a recorded graph (non-scalar loss, double backward, ...)."""


class NumericError(PeriodNetError, FloatingPointError):
    """NaN/Inf encountered where finite values are required."""


class DataError(PeriodNetError):
    """Malformed or inconsistent input files."""


class FormatError(DataError):
    """Bad magic, unsupported version or wrong layout in a binary file."""


class CorruptionError(DataError):
    """Checksum mismatch or truncated payload."""
