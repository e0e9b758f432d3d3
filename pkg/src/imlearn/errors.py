"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents or sequence lengths do not line up."""


class NumericError(ArithmeticError):
    """Non-finite values or a numerically degenerate decomposition."""


class GuardError(ValueError):
    """A dense computation was requested beyond its size guard."""


class SamplingError(NumericError):
    """Conditional outcome weights went significantly negative."""


class TrainingDiverged(NumericError):
    """The training loss became non-finite."""


class FormatError(ValueError):
    """A file does not follow the expected header/payload layout."""
