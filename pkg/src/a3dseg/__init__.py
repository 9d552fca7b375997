"""Anatomy-aware artifact disentanglement and segmentation on spine phantoms."""

__version__ = "0.1.0"
