"""Neighborhood contrastive transformer for change captioning on synthetic scenes."""

__version__ = "0.1.0"
