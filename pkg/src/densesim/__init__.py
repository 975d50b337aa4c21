"""Desk-scale dense self-supervised similarity learning lab."""

__version__ = "0.1.0"
