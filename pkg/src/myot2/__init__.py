"""Cardiac T2 relaxometry and joint segmentation/quantification toolkit."""

__version__ = "0.1.0"
