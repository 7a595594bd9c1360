"""Asymmetric-evolution training for a 1-vs-4 grid arena."""
__version__ = "0.1.0"
