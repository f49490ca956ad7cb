"""Numerical conformal maps of multiply connected planar domains."""

__version__ = "0.1.0"
