"""Attention volumes: per-slice boxes stacked into a binary 3D mask.

A voxel ``(d, y, x)`` is switched on when its centre ``(x + 0.5, y + 0.5)``
lies inside a box of slice ``d`` (half-open on the far edges).
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import InputError
from .rpn import ProposalSet


def rasterize_boxes(boxes, height: int, width: int, out: Optional[np.ndarray] = None) -> np.ndarray:
    """OR the boxes into a ``(height, width)`` float32 mask."""
    mask = np.zeros((height, width), dtype=np.float32) if out is None else out
    for b in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
        # first and one-past-last index whose centre is inside [x1, x2)
        x0 = max(int(np.ceil(b[0] - 0.5)), 0)
        x1 = min(int(np.ceil(b[2] - 0.5)), width)
        y0 = max(int(np.ceil(b[1] - 0.5)), 0)
        y1 = min(int(np.ceil(b[3] - 0.5)), height)
        if x1 > x0 and y1 > y0:
            mask[y0:y1, x0:x1] = 1.0
    return mask


def build_attention(proposals: ProposalSet, dims: Sequence[int]) -> np.ndarray:
    """Binary ``(D, H, W)`` volume from the kept proposals of each slice."""
    d, h, w = (int(v) for v in dims)
    if len(proposals) != d:
        raise InputError(f"{len(proposals)} proposal slices for a volume with {d} slices")
    vol = np.zeros((d, h, w), dtype=np.float32)
    for i, boxes in enumerate(proposals.boxes):
        rasterize_boxes(boxes, h, w, out=vol[i])
    return vol


def attention_from_gt_boxes(gt_boxes: Sequence, dims: Sequence[int]) -> np.ndarray:
    """Oracle attention from per-slice ground-truth boxes (``None`` for empty slices)."""
    d, h, w = (int(v) for v in dims)
    if len(gt_boxes) != d:
        raise InputError(f"{len(gt_boxes)} box slices for a volume with {d} slices")
    vol = np.zeros((d, h, w), dtype=np.float32)
    for i, b in enumerate(gt_boxes):
        if b is not None:
            rasterize_boxes([tuple(b)], h, w, out=vol[i])
    return vol


def build_3d_mask(labels: np.ndarray) -> np.ndarray:
    """Fill the tight axis-aligned 3D box around all foreground voxels."""
    labels = np.asarray(labels)
    vol = np.zeros(labels.shape, dtype=np.float32)
    fg = np.nonzero(labels)
    if len(fg[0]) == 0:
        return vol
    sl = tuple(slice(int(ax.min()), int(ax.max()) + 1) for ax in fg)
    vol[sl] = 1.0
    return vol
