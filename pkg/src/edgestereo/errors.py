"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` (and subclasses) to exit status 2 and
``OSError`` to exit status 3.
"""


class StereoError(Exception):
    """Base class for all library errors."""


class ValidationError(StereoError, ValueError):
    """An argument or data value violates a documented invariant."""


class DimensionError(ValidationError):
    """Array or image dimensions are incompatible with the operation."""


class CapacityError(ValidationError):
    """A descriptor would need more bits than a 64-bit word holds."""


class FormatError(ValidationError):
    """A file is malformed or uses an unsupported variant of its format."""
