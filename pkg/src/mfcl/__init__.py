"""Multifidelity continual learning for physics-informed and data-driven nets."""

__version__ = "0.1.0"
