"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class KriformerError(Exception):
    exit_code = 1


class ParameterError(KriformerError, ValueError):
    """Invalid hyperparameter, option or argument."""


class ShapeError(KriformerError, ValueError):
    exit_code = 2


class DataError(KriformerError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class CheckpointError(DataError):
    pass


class NumericError(KriformerError, ArithmeticError):
    exit_code = 3


class TrainingError(NumericError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
