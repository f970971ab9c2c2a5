"""Exception hierarchy shared by every module."""


class FinsightError(Exception):
    pass


class DimensionError(FinsightError, ValueError):
    """Tensor shapes do not agree."""


class GeometryError(FinsightError, ValueError):
    """Spatial sizes are invalid (empty output, bad padding, non-square image)."""


class DivisibilityError(DimensionError):
    """A channel count is not divisible by the requested number of parts."""


class NonFiniteError(FinsightError, ValueError):
    """NaN or Inf reached an op boundary."""


class ConfigError(FinsightError, ValueError):
    pass


class TopologyError(FinsightError, ValueError):
    """A pyramid level referenced by the neck is missing."""


class GenerationError(FinsightError, RuntimeError):
    pass


class TrainingError(FinsightError, RuntimeError):
    pass


class ParseError(FinsightError, ValueError):
    pass
