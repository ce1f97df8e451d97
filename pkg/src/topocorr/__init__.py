"""Uncertainty evaluation for optical areal topography measurements corrected for systematics."""

from .model import ValidationError

__version__ = "0.1.0"
__all__ = ["ValidationError", "__version__"]
