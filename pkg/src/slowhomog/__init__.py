"""Homogenisation of periodic composites with slowly varying inclusions."""

__version__ = "0.1.0"
