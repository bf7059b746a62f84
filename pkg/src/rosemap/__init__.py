"""Incremental Gaussian-splat mapping with multimodal pose-graph SLAM."""

__version__ = "0.1.0"
