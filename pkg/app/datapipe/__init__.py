"""Measurement ingestion, day segmentation and dataset splits."""
