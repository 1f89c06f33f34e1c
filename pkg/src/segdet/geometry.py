"""Box geometry for the region proposal network.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates with
half-open extent, so a box's area is ``(x2 - x1) * (y2 - y1)``. Arrays of
boxes have shape ``(n, 4)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import kernels
from .errors import InputError

DEFAULT_SCALES = (8.0, 16.0, 32.0)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
# |tw|, |th| above this would overflow exp() for any sane anchor
MAX_LOG_SHIFT = 4.0

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a, b = as_boxes(a), as_boxes(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass(frozen=True)
class AnchorGrid:
    feature_h: int
    feature_w: int
    stride: float
    scales: tuple
    ratios: tuple
    boxes: np.ndarray  # (feature_h * feature_w * A, 4) in (y, x, anchor) order

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return len(self.boxes)


def base_anchors(scales=DEFAULT_SCALES, ratios=DEFAULT_RATIOS) -> np.ndarray:
    """Zero-centred anchor shapes, scale-major: width ``s*sqrt(r)``, height ``s/sqrt(r)``."""
    out = []
    for s in scales:
        for r in ratios:
            if s <= 0 or r <= 0:
                raise InputError(f"anchor scale and ratio must be positive, got {s}, {r}")
            w, h = s * np.sqrt(r), s / np.sqrt(r)
            out.append((-w / 2, -h / 2, w / 2, h / 2))
    return np.asarray(out, dtype=np.float64)


def generate_anchors(
    feature_h: int,
    feature_w: int,
    stride: float,
    scales=DEFAULT_SCALES,
    ratios=DEFAULT_RATIOS,
    image_size: Optional[tuple] = None,
) -> AnchorGrid:
    """Tile anchors over a feature map; cell ``(i, j)`` is centred at ``stride*(j+0.5), stride*(i+0.5)``.

    With ``image_size=(H, W)`` anchors crossing the border are clipped to it.
    """
    if not scales or not ratios:
        raise InputError("need at least one scale and one ratio")
    base = base_anchors(scales, ratios)
    cy = stride * (np.arange(feature_h) + 0.5)
    cx = stride * (np.arange(feature_w) + 0.5)
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    shifts = np.stack([xx, yy, xx, yy], axis=-1).reshape(-1, 1, 4)
    boxes = (shifts + base[None]).reshape(-1, 4)
    if image_size is not None:
        boxes = clip_boxes(boxes, *image_size)
    return AnchorGrid(feature_h, feature_w, float(stride), tuple(scales), tuple(ratios), boxes)


def _center_size(b: np.ndarray):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode(anchors, gts) -> np.ndarray:
    """Regression targets ``(tx, ty, tw, th)`` taking each anchor onto its box."""
    anchors, gts = as_boxes(anchors), as_boxes(gts)
    ax, ay, aw, ah = _center_size(anchors)
    gx, gy, gw, gh = _center_size(gts)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise InputError("anchors must have positive width and height")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise InputError("cannot encode a degenerate (zero-size) box")
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode(anchors, deltas, return_clamped: bool = False):
    """Inverse of :func:`encode`; log shifts are clamped to ``[-4, 4]``.

    With ``return_clamped`` a boolean array flags the rows that were clamped.
    """
    anchors = as_boxes(anchors)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _center_size(anchors)
    tw = np.clip(deltas[:, 2], -MAX_LOG_SHIFT, MAX_LOG_SHIFT)
    th = np.clip(deltas[:, 3], -MAX_LOG_SHIFT, MAX_LOG_SHIFT)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(tw)
    h = ah * np.exp(th)
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if return_clamped:
        clamped = (np.abs(deltas[:, 2]) > MAX_LOG_SHIFT) | (np.abs(deltas[:, 3]) > MAX_LOG_SHIFT)
        return boxes, clamped
    return boxes


def clip_box(b: Sequence[float], h: float, w: float) -> Box:
    return Box(
        min(max(b[0], 0.0), w), min(max(b[1], 0.0), h),
        min(max(b[2], 0.0), w), min(max(b[3], 0.0), h),
    )


def clip_boxes(boxes, h: float, w: float) -> np.ndarray:
    boxes = as_boxes(boxes).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, w)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, h)
    return boxes


@dataclass
class AnchorLabels:
    labels: np.ndarray  # int8 per anchor: POSITIVE / NEGATIVE / IGNORE
    matched_gt: np.ndarray  # index of the best gt for positives, -1 otherwise
    targets: np.ndarray  # (n, 4) regression targets, zero rows for negatives

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)

    @property
    def ignored(self) -> np.ndarray:
        return np.flatnonzero(self.labels == IGNORE)


def assign_labels(anchors, gts, pos_iou: float = 0.7, neg_iou: float = 0.3) -> AnchorLabels:
    """Label anchors against ground-truth boxes.

    Positive: IoU above ``pos_iou`` with some box, or the first anchor reaching
    the best IoU for some box. Negative: best IoU below ``neg_iou`` and not
    positive. Everything else is ignored. Regression targets toward the
    best-overlapping box are filled for every anchor that is not negative.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorGrid) else as_boxes(anchors)
    n = len(boxes)
    gts = as_boxes(gts)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if len(gts) == 0 or n == 0:
        return AnchorLabels(labels, matched, targets)

    ov = iou_matrix(boxes, gts)
    best_gt = ov.argmax(axis=1)
    best = ov[np.arange(n), best_gt]
    labels[best >= neg_iou] = IGNORE
    labels[best > pos_iou] = POSITIVE
    forced = ov.argmax(axis=0)
    for g, a in enumerate(forced):
        if ov[a, g] > 0:
            labels[a] = POSITIVE
    pos = labels == POSITIVE
    matched[pos] = best_gt[pos]
    near = labels != NEGATIVE
    if near.any():
        targets[near] = encode(boxes[near], gts[best_gt[near]])
    return AnchorLabels(labels, matched, targets)


def nms(boxes, scores, iou_thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score.

    Equal scores are visited in index order.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise InputError(f"{len(boxes)} boxes but {len(scores)} scores")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    return kernels.nms_sorted(boxes, order, float(iou_thresh))
