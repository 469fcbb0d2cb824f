"""Continuous-time Transformer with transport-cost regularization."""

__version__ = "0.1.0"
