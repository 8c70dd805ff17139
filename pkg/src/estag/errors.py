"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` to exit code 1 and
:class:`NumericalError` to exit code 2.
"""


class EstagError(Exception):
    """Base class for all package errors."""


class ValidationError(EstagError):
    """Bad input, bad configuration or a violated precondition."""


class ShapeError(ValidationError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class FormatError(ValidationError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class NumericalError(EstagError):
    """NaN/Inf or divergence encountered during computation."""
