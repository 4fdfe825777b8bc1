"""Embedding shim: a thin HTTP service for text/image embeddings and captions."""

__version__ = "0.1.0"
