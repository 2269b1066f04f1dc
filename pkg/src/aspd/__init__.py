"""Hybrid serial/parallel decoding with branch-invisible attention."""

__version__ = "0.1.0"
