"""Conformal out-of-distribution detection for time series via temporal transformations."""
__version__ = "0.1.0"
