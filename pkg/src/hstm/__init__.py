"""Anonymized hypersparse traffic matrices from packet streams."""

__version__ = "0.1.0"
