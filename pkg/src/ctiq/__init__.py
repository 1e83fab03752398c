"""Certified no-reference image quality assessment toolkit."""

__version__ = "0.1.0"
