"""Unified token-stream recommender and its diagnostic toolkit."""

__version__ = "0.1.0"
