"""Exception hierarchy. The CLI maps these onto exit codes."""


class TwoStudyError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TwoStudyError):
    """Invalid configuration or missing artifact (exit code 2)."""


class DataError(TwoStudyError, ValueError):
    """Input data violates a schema or precondition (exit code 3)."""


class SchemaMismatchError(DataError):
    pass


class RuleFormatError(DataError):
    """A rule document is malformed."""


class NumericalError(TwoStudyError, ArithmeticError):
    """A fit could not be computed (exit code 4)."""


class RankDeficientError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message: str, last_deviance: float | None = None):
        super().__init__(message)
        self.last_deviance = last_deviance
