"""Multimodal temporal deep Q-network recommender."""

__version__ = "0.1.0"
