"""Prompted video segmentation evaluation toolkit for surgical video."""

__version__ = "0.1.0"
