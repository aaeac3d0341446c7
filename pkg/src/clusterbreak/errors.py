"""Exception types shared across the package."""


class ClusterBreakError(Exception):
    """Base class for all errors raised by clusterbreak."""


class InvalidParameterError(ClusterBreakError, ValueError):
    pass


class InvalidShapeError(ClusterBreakError, ValueError):
    pass


class ShapeMismatchError(ClusterBreakError, ValueError):
    pass


class LengthMismatchError(ClusterBreakError, ValueError):
    pass


class EmptyClassError(ClusterBreakError):
    pass


class DegenerateClusteringError(ClusterBreakError):
    """A cluster received no samples; retry with another seed."""


class SingularCovarianceError(ClusterBreakError):
    """Covariance is not positive definite; increase the shrinkage."""


class InsufficientDataError(ClusterBreakError):
    pass


class ConfigValidationError(ClusterBreakError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class MissingFieldError(ClusterBreakError, KeyError):
    def __init__(self, field, where=""):
        super().__init__(f"missing field {field!r}" + (f" in {where}" if where else ""))
        self.field = field
