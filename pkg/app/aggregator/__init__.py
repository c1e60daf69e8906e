"""Temporal pattern aggregation over sets of day embeddings."""
