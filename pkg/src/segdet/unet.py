"""3D U-Net segmenter.

Contracting levels apply two padded 3x3x3 convolutions with ReLU, then a
2x2x2 max pool. Expanding levels up-convolve (2x2x2, stride 2), concatenate
the equal-resolution skip features, and apply two more convolutions. A
1x1x1 convolution maps the top level to per-label logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DimensionError, UsageError
from .model import Model
from .optim import init_gaussian
from .tensor import Tensor, concat_channels, no_grad

AXES = ("D", "H", "W")


@dataclass
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 2
    num_labels: int = 2
    init_std: float = 0.01
    # "gaussian": every layer at init_std; "he": 3x3x3 and up-convolutions at
    # sqrt(2/fan_in), only the 1x1 head at init_std
    init: str = "he"

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


class UNet3D(Model):
    kind = "unet"

    def __init__(self, cfg: UNetConfig = UNetConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        cin = cfg.in_channels
        for lvl in range(cfg.depth + 1):
            ch = cfg.channels(lvl)
            self._double_conv(f"down.{lvl}", cin, ch)
            cin = ch
        for lvl in reversed(range(cfg.depth)):
            ch = cfg.channels(lvl)
            self.add_param(f"up.{lvl}.upconv.weight", (cfg.channels(lvl + 1), ch, 2, 2, 2))
            self.add_param(f"up.{lvl}.upconv.bias", (ch,))
            self._double_conv(f"up.{lvl}", 2 * ch, ch)
        self.add_param("head.weight", (cfg.num_labels, cfg.channels(0), 1, 1, 1))
        self.add_param("head.bias", (cfg.num_labels,))
        stds = {}
        if cfg.init == "he":
            for name, p in self.params.items():
                if name.endswith("conv1.weight") or name.endswith("conv2.weight"):
                    stds[name] = float(np.sqrt(2.0 / np.prod(p.shape[1:])))
                elif name.endswith("upconv.weight"):
                    # stride equals kernel, so each output voxel sees one tap per input channel
                    stds[name] = float(np.sqrt(2.0 / p.shape[0]))
        elif cfg.init != "gaussian":
            raise UsageError(f"unknown unet init {cfg.init!r}")
        init_gaussian(self.params, std=cfg.init_std, seed=seed, stds=stds)

    def _double_conv(self, prefix: str, cin: int, cout: int) -> None:
        self.add_param(f"{prefix}.conv1.weight", (cout, cin, 3, 3, 3))
        self.add_param(f"{prefix}.conv1.bias", (cout,))
        self.add_param(f"{prefix}.conv2.weight", (cout, cout, 3, 3, 3))
        self.add_param(f"{prefix}.conv2.bias", (cout,))


def _block(p, prefix: str, x: Tensor) -> Tensor:
    x = ops.relu(ops.conv(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], padding=1))
    return ops.relu(ops.conv(x, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], padding=1))


def check_input(cfg: UNetConfig, shape) -> None:
    if len(shape) != 5:
        raise DimensionError(f"unet expects [N, C, D, H, W], got shape {tuple(shape)}")
    if shape[1] != cfg.in_channels:
        raise DimensionError(f"unet configured for {cfg.in_channels} input channels, got {shape[1]}")
    f = 2 ** cfg.depth
    for axis, s in zip(AXES, shape[2:]):
        if s % f:
            raise DimensionError(f"axis {axis} has extent {s}, not divisible by 2^depth = {f}")


def unet_forward(model: UNet3D, x: Tensor) -> Tensor:
    """Logits ``[N, num_labels, D, H, W]`` for input ``[N, C, D, H, W]``."""
    cfg = model.cfg
    check_input(cfg, x.shape)
    p = model.params
    skips = []
    h = x
    for lvl in range(cfg.depth):
        h = _block(p, f"down.{lvl}", h)
        skips.append(h)
        h = ops.maxpool(h, 2)
    h = _block(p, f"down.{cfg.depth}", h)
    for lvl in reversed(range(cfg.depth)):
        h = ops.conv_transpose(h, p[f"up.{lvl}.upconv.weight"], p[f"up.{lvl}.upconv.bias"], stride=2)
        h = _block(p, f"up.{lvl}", concat_channels(skips[lvl], h))
    return ops.conv(h, p["head.weight"], p["head.bias"])


def seg_loss(logits: Tensor, labels) -> Tensor:
    """Voxel-mean softmax cross-entropy; ``labels`` is ``(D, H, W)`` or ``(N, D, H, W)``."""
    labels = np.asarray(labels).astype(np.int64)
    if labels.ndim == logits.ndim - 2:
        labels = labels[None]
    return ops.softmax_cross_entropy(logits, labels)


def predict(model: UNet3D, x) -> np.ndarray:
    """Voxel-wise argmax label volume ``(D, H, W)``; ties go to the lower label."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    with no_grad():
        logits = unet_forward(model, t).data
    return np.argmax(logits[0], axis=0).astype(np.uint8)
