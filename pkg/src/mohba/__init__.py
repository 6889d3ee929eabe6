"""Hierarchical VAE embeddings and concept analysis for multiagent behavior corpora."""

__version__ = "0.1.0"
