"""Learned keypoint detection with generalized hinging hyperplanes."""

__version__ = "0.1.0"
