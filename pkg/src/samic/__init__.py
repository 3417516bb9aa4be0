"""Semantic-aware selective-scan image codec."""

__version__ = "0.1.0"
