"""Stereophonic acoustic echo cancellation with a lightweight complex spectral mapping network."""
__version__ = "0.1.0"
