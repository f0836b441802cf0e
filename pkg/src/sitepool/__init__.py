"""Bayesian hierarchical aggregation of evidence from multiple randomized experiments."""

__version__ = "0.1.0"
