"""Multi-view prompt learning for open-vocabulary segmentation on toy encoders."""

__version__ = "0.1.0"
