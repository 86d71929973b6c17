"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised when a configuration file or object cannot be resolved."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DetectabilityError(ValueError):
    """A structural detectability condition (rank test) does not hold."""


class AssumptionViolation(ValueError):
    """A numerical spot check of a modeling assumption failed."""

    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample
