"""Verification lab for degenerate Bellman equations with constant coefficients."""

__version__ = "0.1.0"
