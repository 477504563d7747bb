"""Masked reference-token adapter toolkit."""

__version__ = "0.1.0"
