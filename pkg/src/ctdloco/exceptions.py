"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """Dimensions or options are inconsistent with each other."""


class NumericError(FloatingPointError):
    """A non-finite value entered a computation that requires finite input."""


class WeightFileError(ValueError):
    """A weight, basis or config file could not be parsed."""


class UndefinedPhaseError(ValueError):
    """The gait cycle is too small in the PC1-PC2 plane to define a phase."""


class AnalysisError(RuntimeError):
    """A linear-algebra step of the analysis failed for one item."""
