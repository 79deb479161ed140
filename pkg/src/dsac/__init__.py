"""Distributional soft actor-critic laboratory."""

__version__ = "0.1.0"
