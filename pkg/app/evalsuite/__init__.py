"""Downstream protocols and metrics on learned embeddings."""
