"""Exception types shared across the package."""


class CmrCountError(Exception):
    """Base class for all package-specific errors."""


class InvalidParamsError(CmrCountError, ValueError):
    """Distribution or heaping parameters violate their domain constraints."""


class FitInfeasibleError(CmrCountError):
    """A likelihood cannot be evaluated (e.g. an observation with zero mass)."""


class EstimationError(CmrCountError):
    """An estimator could not produce a valid estimate."""


class SingularStackError(CmrCountError):
    """The bread matrix of an estimating-equation stack is numerically singular."""


class ConfigError(CmrCountError):
    """Invalid run configuration (bad keys, inconsistent options)."""


class DataError(CmrCountError):
    """Input data fails validation."""
