"""Unsupervised behavior analysis and magnification on video corpora."""

__version__ = "0.1.0"
