"""Unsupervised deep metric learning with clustering pseudo-labels and rotation self-supervision."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
