"""Lumbar-spine tumor segmentation, classification and localization on synthetic phantoms."""

__version__ = "0.1.0"
