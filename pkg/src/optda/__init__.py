"""Optimization-based smoothing and filtering for partially observed bilinear ODEs."""

__version__ = "0.1.0"
