"""Batch processing orchestration for BIDS-organized imaging archives."""

__version__ = "0.1.0"
