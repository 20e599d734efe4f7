"""Explainable recommendation by policy-gradient walks over a user-item-entity graph."""

__version__ = "0.1.0"
