"""Exception types shared across the pipeline.

Argument errors are plain ``ValueError``; the classes below mark failures the
CLI maps to distinct exit codes.
"""


class OctagraphError(Exception):
    """Base class for pipeline errors."""


class ImageFormatError(OctagraphError):
    """Unsupported or malformed image file."""


class GraphFormatError(OctagraphError):
    """Malformed or version-mismatched graph/checkpoint/index payload."""


class DegenerateInputError(OctagraphError):
    """Input has no usable structure (e.g. no background component)."""


class NumericError(OctagraphError):
    """Non-finite values appeared in a numerical computation."""
