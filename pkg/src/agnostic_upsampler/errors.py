"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An argument or stored value violates a documented invariant."""


class ShapeError(ValidationError):
    """Array shapes are inconsistent with an operation's contract."""


class FormatError(ValueError):
    """A file does not conform to the expected container or image format."""


class UnsupportedFormatError(FormatError):
    """The file is well-formed but uses a variant this package cannot read."""


class TruncatedFileError(OSError):
    """A file ended before its declared payload was complete."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values."""
