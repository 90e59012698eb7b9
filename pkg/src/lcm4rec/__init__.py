"""Learned non-parametric choice models for recommendation."""

__version__ = "0.1.0"
