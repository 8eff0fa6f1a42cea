"""Uncertainty-guided noise-resilient training for clustering-based domain adaptation."""

__version__ = "0.1.0"
