"""Unsupervised spectral correspondence and point distribution shape models."""

__version__ = "0.1.0"
