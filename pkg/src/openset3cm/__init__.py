"""Conditional channel capacity regularization for open-set point-cloud segmentation."""

__version__ = "0.1.0"
