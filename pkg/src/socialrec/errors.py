"""Exception types shared across the package."""


class SocialRecError(Exception):
    """Base class for all package errors."""


class ShapeError(SocialRecError):
    """Operands do not conform under standard linear-algebra rules."""


class IngestionError(SocialRecError):
    """Input data is malformed or references out-of-range entities."""


class ConfigError(SocialRecError):
    """A configuration value is missing, unknown, or invalid."""


class NumericalError(SocialRecError):
    """A computation produced non-finite or otherwise unusable values."""


class EvaluationError(SocialRecError):
    """The evaluation protocol cannot run on the given data."""
