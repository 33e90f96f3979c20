"""Bag-of-features slide classification with a reproducible evaluation harness."""

__version__ = "0.1.0"
