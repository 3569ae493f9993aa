"""Concise explanations: conditional relevance maps reduced by NMF and grouped by DBSCAN."""

__version__ = "0.1.0"
