"""Sequence labeling with a frozen toy masked LM and swappable task plugins."""

__version__ = "0.1.0"
