"""Exception hierarchy shared by all densemap modules."""


class DensemapError(Exception):
    """Base class for every error raised deliberately by densemap."""


class ValidationError(DensemapError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(ValidationError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SizeMismatchError(FormatError):
    """Payload length disagrees with the header dimensions."""


class NotFoundError(ValidationError, KeyError):
    """A requested frame or item does not exist."""

    def __str__(self):
        return Exception.__str__(self)


class DegenerateInputError(ValidationError):
    """Input is well-formed but admits no meaningful result."""


class CapacityError(ValidationError):
    """Problem size exceeds what the requested solver supports."""


class SingularityError(ValidationError):
    """A linear system has no unique solution."""


class InfiniteLossError(DensemapError, OverflowError):
    """A loss evaluates to +inf (zero predicted probability on a true class)."""
