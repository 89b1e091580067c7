"""Desk-scale block-sparse attention lab."""

__version__ = "0.1.0"
