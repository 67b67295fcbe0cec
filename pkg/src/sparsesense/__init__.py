"""Sparse sensor selection for Gaussian detection via (approximately) submodular set functions."""

__version__ = "0.1.0"
