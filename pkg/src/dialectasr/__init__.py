"""Desk-scale toolkit for dialect-adaptive CTC speech recognition."""

__version__ = "0.1.0"
