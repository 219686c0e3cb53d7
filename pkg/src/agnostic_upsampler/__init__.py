"""Encoder-agnostic, any-resolution feature upsampling with window attention."""

from agnostic_upsampler.errors import (
    FormatError,
    NumericalError,
    ShapeError,
    TruncatedFileError,
    UnsupportedFormatError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "FormatError",
    "NumericalError",
    "ShapeError",
    "TruncatedFileError",
    "UnsupportedFormatError",
    "ValidationError",
]
