"""Desk-scale foundation-model-assisted multi-task domain adaptation."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
