"""Recurrent-attention instance segmentation on synthetic occluded-shape scenes."""

__version__ = "0.1.0"
