"""Moment-method boundary null control for the 1D Caginalp phase-field system."""

__version__ = "0.1.0"
