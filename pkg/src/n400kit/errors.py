"""Exception hierarchy.

Each class carries the process exit code the CLI maps it to.
"""


class N400KitError(Exception):
    exit_code = 1


class InputError(N400KitError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2

    def __init__(self, message, *, source=None, line=None):
        self.source = source
        self.line = line
        where = ""
        if source is not None and line is not None:
            where = f"{source}:{line}: "
        elif source is not None:
            where = f"{source}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class NumericalError(N400KitError, ArithmeticError):
    """Rank deficiency, non-finite likelihoods and similar failures."""

    exit_code = 3


class ConfigError(N400KitError, ValueError):
    """Invalid run configuration."""

    exit_code = 4
