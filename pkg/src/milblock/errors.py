class MilError(Exception):
    """Base class for errors raised by milblock."""


class ValidationError(MilError, ValueError):
    """Bad input: wrong shapes, out-of-range values, malformed files or configs."""


class ShapeError(ValidationError):
    pass


class FormatError(ValidationError):
    """A dataset, checkpoint or manifest on disk failed validation."""


class NonFiniteError(MilError, FloatingPointError):
    """A NaN or Inf appeared where the computation requires finite values."""
