"""Closed-loop recommender simulation and content-diversity analysis."""

__version__ = "0.1.0"
