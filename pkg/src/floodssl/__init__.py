"""Pseudo-label semi-supervised classification and segmentation on a numpy autodiff core."""

__version__ = "0.1.0"
