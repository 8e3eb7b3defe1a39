"""Exception types raised across the package."""


class GiimError(Exception):
    """Base class for all package errors."""


class DimensionError(GiimError, ValueError):
    pass


class SingularityError(GiimError, ArithmeticError):
    pass


class ConfigurationError(GiimError, ValueError):
    pass


class IncompleteCaseError(GiimError, ValueError):
    """A (lesion, view) slot has neither an observed nor an imputed feature."""


class InsufficientDataError(GiimError, ValueError):
    pass


class UndefinedMetricError(GiimError, ValueError):
    pass


class DatasetParseError(GiimError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class TrainingDivergedError(GiimError, RuntimeError):
    pass


class SweepCellError(GiimError, RuntimeError):
    """A sweep cell failed; the message names its (eta, imputer)."""
