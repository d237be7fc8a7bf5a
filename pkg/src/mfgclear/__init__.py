"""Numerical lab for mean-field-game market clearing."""

__version__ = "0.1.0"
