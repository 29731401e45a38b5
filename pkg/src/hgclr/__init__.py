"""Hierarchy-guided contrastive learning for hierarchical text classification."""

__version__ = "0.1.0"
