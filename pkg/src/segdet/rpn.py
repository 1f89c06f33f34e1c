"""Region proposal network over single 2D slices.

Output layouts (fixed, relied on by the loss and proposal extraction):

* ``cls``: ``[N, 2*A, h, w]``, channel ``k*A + a`` is the score of class
  ``k`` (0 background, 1 object) for anchor ``a``.
* ``reg``: ``[N, 4*A, h, w]``, channel ``4*a + j`` is offset ``j`` of
  ``(tx, ty, tw, th)`` for anchor ``a``.

Flattened per-anchor views are ordered ``(y, x, anchor)``, matching
:func:`segdet.geometry.generate_anchors`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import geometry, ops
from .errors import DimensionError, UsageError
from .model import Model
from .optim import init_gaussian
from .tensor import Tensor, no_grad, permute, reshape, take_rows


@dataclass
class RpnConfig:
    backbone_channels: Tuple[int, ...] = (8, 16, 32)
    head_channels: int = 64
    scales: Tuple[float, ...] = geometry.DEFAULT_SCALES
    ratios: Tuple[float, ...] = geometry.DEFAULT_RATIOS
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    batch: int = 256
    pos_fraction: float = 0.5
    positives_only: bool = False
    # also train box regression on ignored anchors (IoU between neg_iou and pos_iou)
    regress_ignored: bool = True
    score_thresh: float = 0.5
    nms_thresh: float = 0.5
    max_proposals_per_slice: int = 3
    init_std: float = 0.01
    # "gaussian": every layer at init_std; "he": every 3x3 conv at sqrt(2/fan_in),
    # only the 1x1 cls/reg heads at init_std
    backbone_init: str = "he"

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


class RpnModel(Model):
    kind = "rpn"

    def __init__(self, cfg: RpnConfig = RpnConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        a = cfg.anchors_per_cell
        cin = 1
        for i, ch in enumerate(cfg.backbone_channels):
            self.add_param(f"backbone.{i}.conv1.weight", (ch, cin, 3, 3))
            self.add_param(f"backbone.{i}.conv1.bias", (ch,))
            self.add_param(f"backbone.{i}.conv2.weight", (ch, ch, 3, 3))
            self.add_param(f"backbone.{i}.conv2.bias", (ch,))
            cin = ch
        self.add_param("head.conv.weight", (cfg.head_channels, cin, 3, 3))
        self.add_param("head.conv.bias", (cfg.head_channels,))
        self.add_param("head.cls.weight", (2 * a, cfg.head_channels, 1, 1))
        self.add_param("head.cls.bias", (2 * a,))
        self.add_param("head.reg.weight", (4 * a, cfg.head_channels, 1, 1))
        self.add_param("head.reg.bias", (4 * a,))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        stds = {}
        if self.cfg.backbone_init == "he":
            for name, p in self.params.items():
                if name.endswith("weight") and p.shape[-1] == 3:
                    fan_in = int(np.prod(p.shape[1:]))
                    stds[name] = float(np.sqrt(2.0 / fan_in))
        elif self.cfg.backbone_init != "gaussian":
            raise UsageError(f"unknown backbone_init {self.cfg.backbone_init!r}")
        init_gaussian(self.params, std=self.cfg.init_std, seed=seed, stds=stds)

    def anchors(self, height: int, width: int) -> geometry.AnchorGrid:
        f = self.cfg.downsample_factor
        return geometry.generate_anchors(height // f, width // f, f, self.cfg.scales, self.cfg.ratios,
                                         image_size=(height, width))


def rpn_forward(model: RpnModel, x: Tensor) -> Tuple[Tensor, Tensor]:
    """Score and regress every anchor of the slices in ``x[N, 1, H, W]``."""
    cfg = model.cfg
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"rpn expects [N, 1, H, W] slices, got {x.shape}")
    f = cfg.downsample_factor
    for axis, s in zip(("H", "W"), x.shape[2:]):
        if s % f:
            raise DimensionError(f"slice axis {axis} of extent {s} is not divisible by {f}")
    p = model.params
    h = x
    for i in range(len(cfg.backbone_channels)):
        h = ops.relu(ops.conv(h, p[f"backbone.{i}.conv1.weight"], p[f"backbone.{i}.conv1.bias"], padding=1))
        h = ops.relu(ops.conv(h, p[f"backbone.{i}.conv2.weight"], p[f"backbone.{i}.conv2.bias"], padding=1))
        h = ops.maxpool(h, 2)
    h = ops.relu(ops.conv(h, p["head.conv.weight"], p["head.conv.bias"], padding=1))
    cls = ops.conv(h, p["head.cls.weight"], p["head.cls.bias"])
    reg = ops.conv(h, p["head.reg.weight"], p["head.reg.bias"])
    return cls, reg


def anchor_logits(cls: Tensor, per_cell: int) -> Tensor:
    """``[N, 2A, h, w]`` -> ``[N*h*w*A, 2]``."""
    n, _, fh, fw = cls.shape
    t = permute(reshape(cls, (n, 2, per_cell, fh, fw)), (0, 3, 4, 2, 1))
    return reshape(t, (n * fh * fw * per_cell, 2))


def anchor_deltas(reg: Tensor, per_cell: int) -> Tensor:
    """``[N, 4A, h, w]`` -> ``[N*h*w*A, 4]``."""
    n, _, fh, fw = reg.shape
    t = permute(reshape(reg, (n, per_cell, 4, fh, fw)), (0, 3, 4, 1, 2))
    return reshape(t, (n * fh * fw * per_cell, 4))


def sample_minibatch(labels: geometry.AnchorLabels, batch: int = 256, pos_fraction: float = 0.5,
                     rng: Optional[np.random.Generator] = None, positives_only: bool = False) -> np.ndarray:
    """Draw up to ``batch * pos_fraction`` positives, then fill with negatives.

    With ``positives_only`` no negatives are drawn. Returned indices are sorted.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    pos, neg = labels.positives, labels.negatives
    cap = batch if positives_only else int(batch * pos_fraction)
    n_pos = min(len(pos), cap)
    n_neg = 0 if positives_only else min(len(neg), batch - n_pos)
    if n_pos + n_neg == 0:
        raise UsageError("no anchors available to sample")
    chosen_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else pos[:0]
    chosen_neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
    return np.sort(np.concatenate([chosen_pos, chosen_neg]).astype(np.int64))


def rpn_loss(cls: Tensor, reg: Tensor, labels: geometry.AnchorLabels, sample: np.ndarray,
             regress_ignored: bool = False) -> Tensor:
    """Log loss over the sampled anchors plus smooth-L1 on sampled positives.

    With ``regress_ignored`` every ignored anchor adds its smooth-L1 term as
    well. Both terms are normalised by the number of sampled anchors.
    """
    sample = np.asarray(sample, dtype=np.int64)
    if sample.size == 0:
        raise UsageError("rpn_loss needs a non-empty anchor sample")
    per_cell = cls.shape[1] // 2
    logits = take_rows(anchor_logits(cls, per_cell), sample)
    target = (labels.labels[sample] == geometry.POSITIVE).astype(np.int64)
    loss = ops.softmax_cross_entropy(logits, target)
    pos = sample[labels.labels[sample] == geometry.POSITIVE]
    if regress_ignored:
        pos = np.union1d(pos, labels.ignored)
    if pos.size:
        deltas = take_rows(anchor_deltas(reg, per_cell), pos)
        reg_term = ops.smooth_l1(deltas, labels.targets[pos].astype(deltas.dtype))
        loss = loss + reg_term * (1.0 / sample.size)
    return loss


def objectness(cls: np.ndarray, per_cell: int) -> np.ndarray:
    """Object probability per anchor for each slice: ``[N, h*w*A]``."""
    n, _, fh, fw = cls.shape
    z = cls.reshape(n, 2, per_cell, fh, fw).transpose(0, 3, 4, 2, 1).reshape(n, -1, 2)
    return ops.softmax(z.astype(np.float64), axis=-1)[..., 1]


@dataclass
class ProposalSet:
    """Kept boxes ``(k, 4)`` and descending scores ``(k,)`` for every slice."""

    boxes: List[np.ndarray] = field(default_factory=list)
    scores: List[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def top1(self, d: int) -> Optional[np.ndarray]:
        return self.boxes[d][0] if len(self.boxes[d]) else None


def select_proposals(anchors: np.ndarray, probs: np.ndarray, deltas: np.ndarray, height: int, width: int,
                     cfg: RpnConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Score filter, decode, clip, NMS and top-k for one slice."""
    keep = np.flatnonzero(probs >= cfg.score_thresh)
    if keep.size == 0:
        return np.zeros((0, 4)), np.zeros(0)
    boxes = geometry.clip_boxes(geometry.decode(anchors[keep], deltas[keep]), height, width)
    scores = probs[keep]
    nonempty = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[nonempty], scores[nonempty]
    kept = geometry.nms(boxes, scores, cfg.nms_thresh)[: cfg.max_proposals_per_slice]
    return boxes[kept], scores[kept]


def extract_proposals(model: RpnModel, volume, cfg: Optional[RpnConfig] = None, chunk: int = 8) -> ProposalSet:
    """Run the detector on every D-slice of a ``(D, H, W)`` (or ``[1, 1, D, H, W]``) volume."""
    cfg = model.cfg if cfg is None else cfg
    vol = volume.data if isinstance(volume, Tensor) else np.asarray(volume, dtype=np.float32)
    if vol.ndim == 5:
        vol = vol[0, 0]
    if vol.ndim != 3:
        raise DimensionError(f"expected a (D, H, W) volume, got shape {vol.shape}")
    d, height, width = vol.shape
    grid = model.anchors(height, width)
    a = grid.per_cell
    out = ProposalSet()
    with no_grad():
        for start in range(0, d, chunk):
            x = Tensor(vol[start:start + chunk, None])
            cls, reg = rpn_forward(model, x)
            probs = objectness(cls.data, a)
            n, _, fh, fw = reg.shape
            deltas = reg.data.reshape(n, a, 4, fh, fw).transpose(0, 3, 4, 1, 2).reshape(n, -1, 4)
            for i in range(n):
                b, s = select_proposals(grid.boxes, probs[i], deltas[i], height, width, cfg)
                out.boxes.append(b)
                out.scores.append(s)
    return out
