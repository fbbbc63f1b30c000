"""Compact ConvNeXt-style CT slice classifier with a three-branch pooling head.

Pure numpy with optional numba kernels (set ``MBCONVNEXT_NO_NUMBA=1`` to force
the numpy path).
"""
from .kernels import get_backend, set_backend

__version__ = "0.1.0"

__all__ = ["get_backend", "set_backend", "__version__"]
