"""Exception hierarchy shared by every module."""


class DeformsegError(Exception):
    """Base class for library errors."""


class DimensionError(DeformsegError, ValueError):
    """Array or image dimensions do not agree with what a model expects."""


class DegenerateInputError(DeformsegError, ValueError):
    """Input is geometrically or statistically degenerate (zero extent, one class, ...)."""


class DivergenceError(DeformsegError, ArithmeticError):
    """Training produced a non-finite loss."""


class MissingDetectorError(DeformsegError, LookupError):
    """A detector or model required for a stage is absent from a bundle."""
