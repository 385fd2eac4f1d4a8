class DoubleGenError(Exception):
    """Base class for every error raised by doublegen."""


class ConfigError(DoubleGenError, ValueError):
    """Invalid experiment configuration."""


class DataError(DoubleGenError, ValueError):
    """Malformed or insufficient data (empty datasets, shape mismatches, degenerate folds)."""


class NumericalError(DoubleGenError, ArithmeticError):
    """A computation produced non-finite values."""


class ReferenceUnavailableError(DoubleGenError):
    """The backend cannot provide a reference hypothesis for the data-generating process."""

    def __init__(self, message: str = "no reference hypothesis") -> None:
        super().__init__(message)


class StageError(DoubleGenError):
    """An error raised inside a pipeline stage, labelled with that stage."""

    def __init__(self, stage: str, error: Exception) -> None:
        self.stage = stage
        self.error = error
        super().__init__(f"{stage}: {error}")
