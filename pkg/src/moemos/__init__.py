"""Mixture-of-experts multi-task MOS prediction over precomputed speech embeddings."""

__version__ = "0.1.0"
