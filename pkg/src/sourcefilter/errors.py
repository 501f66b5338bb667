"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SourceFilterError(Exception):
    exit_code = 2


class UsageError(SourceFilterError, ValueError):
    exit_code = 1


class DataError(SourceFilterError, ValueError):
    exit_code = 2


class NumericalError(SourceFilterError, ArithmeticError):
    exit_code = 3


class UnstableFilterError(NumericalError):
    """A reflection coefficient reached or exceeded unit magnitude."""


class FormantCollisionError(NumericalError):
    """Relocated formants would cross each other."""

    def __init__(self, message, frame=None, pair=None):
        super().__init__(message)
        self.frame = frame
        self.pair = pair
