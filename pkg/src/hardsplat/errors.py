"""Exception types shared across the package."""


class DegenerateRotationError(ValueError):
    """Raised when a quaternion is too close to zero to define a rotation."""


class NumericDegeneracyError(RuntimeError):
    """Raised when a covariance stays singular after regularization."""


class InvalidSceneSpecError(ValueError):
    """Raised for unusable synthetic-scene parameters."""


class ContractViolationError(RuntimeError):
    """Raised when an operation receives stale or mismatched intermediates."""


class NanLossError(RuntimeError):
    """Raised when training encounters a non-finite loss."""
