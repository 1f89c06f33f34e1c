"""Segmentation-by-detection on synthetic volumes."""
