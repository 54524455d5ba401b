"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class OutOfDomainError(ValueError):
    """A timepoint falls outside the domain of the object it is evaluated on."""


class DataFormatError(ValueError):
    """Input data could not be parsed."""


class IllPosedFitError(ArithmeticError):
    """A penalized least-squares system is singular after penalization."""


class UndefinedMetricError(ArithmeticError):
    """A metric or ratio has a zero denominator."""


class StageError(RuntimeError):
    """Wraps an error raised inside one stage of an estimation pipeline.

    Parameters
    ----------
    stage : str
        Name of the pipeline stage that failed.
    cause : Exception
        The original exception.
    """

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
