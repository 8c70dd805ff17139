"""Equivariant spatio-temporal attention for trajectory forecasting, built on a small numpy autodiff."""

from .errors import EstagError, FormatError, NumericalError, ShapeError, ValidationError

__version__ = "0.1.0"

__all__ = ["EstagError", "FormatError", "NumericalError", "ShapeError", "ValidationError", "__version__"]
