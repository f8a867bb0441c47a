"""Exception types shared across the package."""


class CoopBevError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(CoopBevError):
    """Operands have incompatible shapes or grid geometry."""


class GradcheckError(CoopBevError):
    """Gradient checking was invoked on an unsupported graph."""


class DegenerateAffineError(CoopBevError):
    """Affine transform is (numerically) non-invertible."""


class DegenerateBoxError(CoopBevError):
    """A box with zero or negative area was passed to a metric."""


class SceneGenerationError(CoopBevError):
    """Rejection sampling could not satisfy the scene constraints."""


class MetricError(CoopBevError):
    """Metric is undefined for the given inputs (e.g. no ground truth)."""


class ConfigError(CoopBevError):
    """Invalid, unknown, or missing configuration."""


class CheckpointError(CoopBevError):
    """Checkpoint file is missing, corrupt, or built for another config."""


class NumericalError(CoopBevError):
    """Training or evaluation produced NaN/Inf."""


class MalformedMessage(CoopBevError):
    """Message bytes do not start with a valid header."""


class CorruptPayload(CoopBevError):
    """Message checksum does not match header+payload."""


class Truncated(CoopBevError):
    """Message bytes end before the declared payload/checksum."""
