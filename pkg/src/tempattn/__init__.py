"""Attention-based temporal classification of cell-fate image sequences."""

__version__ = "0.1.0"
