"""Uncertainty estimation and evaluation for dense optical-flow regression."""

__version__ = "0.1.0"
