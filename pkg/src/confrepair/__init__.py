"""Detect and repair Android XML configuration compatibility bugs."""

__version__ = "0.1.0"
