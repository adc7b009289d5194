"""
Exception hierarchy shared by the GCPH components.

Each class carries the process exit code the command-line front end uses
when the error escapes a command.
"""


class GcphError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 2


class ConfigurationError(GcphError, ValueError):
    """Invalid configuration: bad grid, bad hyper-parameters, rank deficiency."""

    exit_code = 1


class InputError(GcphError, ValueError):
    """Arguments with the wrong shape, sign or finiteness."""

    exit_code = 2


class DataError(GcphError, ValueError):
    """Problems with tabular input files or dataset splits."""

    exit_code = 2


class UndefinedMetricError(GcphError, ArithmeticError):
    """A metric cannot be computed on the given data."""

    exit_code = 2


class NumericalAbort(GcphError, ArithmeticError):
    """Training produced a non-finite loss and was stopped."""

    exit_code = 3
