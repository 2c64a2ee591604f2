"""Bayesian digital twin of a multi-access wireless network."""

__version__ = "0.1.0"
