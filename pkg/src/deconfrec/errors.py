"""Exception hierarchy; each class carries the CLI exit code for its category."""


class DeconfrecError(Exception):
    exit_code = 1


class ConfigError(DeconfrecError, ValueError):
    exit_code = 2


class DataError(DeconfrecError, ValueError):
    exit_code = 3


class EmptyKCoreError(DataError):
    pass


class CheckpointError(DeconfrecError):
    exit_code = 4


class NumericalError(DeconfrecError, ArithmeticError):
    exit_code = 5


class DivergenceError(NumericalError):
    """Training produced a non-finite loss; ``params`` holds the last good state."""

    def __init__(self, message, params=None, component=None):
        super().__init__(message)
        self.params = params
        self.component = component
