"""Encoder-decoder CNN segmentation with dense CRF refinement for aerial land cover."""

__version__ = "0.1.0"

CLASSES = ("background", "building", "car", "impervious_surface", "low_vegetation", "tree")
