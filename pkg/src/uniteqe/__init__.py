"""Unified translation quality estimation toolkit."""

__version__ = "0.1.0"
