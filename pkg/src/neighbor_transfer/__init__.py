"""Neighbor-transfer training for multi-modal mappings learned from sparse annotations."""

__version__ = "0.1.0"
