"""Triplet sampling and the Siamese-triplet objective."""
