"""Exception types shared across the package."""


class StainVolError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(StainVolError, ValueError):
    pass


class EstimationFailedError(StainVolError):
    """Stain matrix estimation could not find enough usable tissue pixels."""


class DegenerateStainsError(EstimationFailedError):
    """The two estimated stain directions are (nearly) collinear."""


class PoolEmptyError(StainVolError):
    pass


class DivergenceError(StainVolError):
    """Raised when an optimization produces a non-finite loss.

    The last finite iterate is attached as ``result`` so callers can still
    persist it.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class FormatError(StainVolError, ValueError):
    """A file does not match the expected on-disk layout."""
