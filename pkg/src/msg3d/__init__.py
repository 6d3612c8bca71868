"""Disentangled multi-scale and unified spatial-temporal graph convolutions."""

__version__ = "0.1.0"
