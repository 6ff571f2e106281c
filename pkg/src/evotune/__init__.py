"""Evolutionary program search with preference-tuned generators."""

__version__ = "0.1.0"
