"""Exception hierarchy shared by all modules."""


class MotionEMError(Exception):
    """Base class for errors raised by motionem."""


class ShapeError(MotionEMError, ValueError):
    """Grids, geometries or array shapes do not match."""


class InvalidInputError(MotionEMError, ValueError):
    """Input values violate a precondition (NaN, negative counts, ...)."""


class ConfigurationError(MotionEMError, ValueError):
    """A configuration value is out of its admissible range."""


class UndefinedMetricError(MotionEMError, ValueError):
    """A metric is not defined for the given inputs."""


class MagnitudeError(MotionEMError, ValueError):
    """A velocity field is too large to exponentiate."""
