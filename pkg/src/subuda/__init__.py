"""Subtype-aware unsupervised domain adaptation on tabular features."""

__version__ = "0.1.0"
