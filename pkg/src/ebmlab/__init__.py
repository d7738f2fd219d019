"""Desk-scale laboratory for semi-supervised learning with energy-based models."""

__version__ = "0.1.0"
