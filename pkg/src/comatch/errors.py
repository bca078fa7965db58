"""Exception hierarchy.

Every error carries a short machine-readable ``category`` which the CLI
prints and maps to an exit code.
"""


class ComatchError(Exception):
    category = "error"
    exit_code = 1


class ValidationError(ComatchError, ValueError):
    category = "validation"
    exit_code = 2


class ConfigurationError(ValidationError):
    category = "configuration"
    exit_code = 2


class DimensionError(ComatchError, ValueError):
    category = "dimension"
    exit_code = 3


class DataIOError(ComatchError, OSError):
    category = "io"
    exit_code = 4


class FormatError(ComatchError, ValueError):
    category = "format"
    exit_code = 5


class StateError(ComatchError, RuntimeError):
    category = "state"
    exit_code = 6


class NumericalError(ComatchError, FloatingPointError):
    category = "numerical"
    exit_code = 7
