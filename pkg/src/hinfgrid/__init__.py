"""Structured H-infinity control and stability certification for grid converters."""

__version__ = "0.1.0"
