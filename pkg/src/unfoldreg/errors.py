"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class UnfoldRegError(Exception):
    exit_code = 1


class InputError(UnfoldRegError, ValueError):
    """Shape mismatch or otherwise invalid argument."""

    exit_code = 2


class ConfigError(UnfoldRegError, ValueError):
    exit_code = 2


class StateError(UnfoldRegError, RuntimeError):
    """Missing checkpoint, unloaded model, existing output directory."""

    exit_code = 3


class NumericalError(UnfoldRegError, ArithmeticError):
    exit_code = 4
