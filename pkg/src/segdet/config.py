"""Pipeline configuration and its ``key = value`` file format.

Keys are dotted ``section.field`` names (``rpn.score_thresh``,
``train.seg_iters``); top-level keys have no section. ``#`` starts a
comment. Unknown keys and unparsable values are rejected before any work
starts.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Tuple

from .errors import UsageError
from .phantom import DEFAULT_DIMS, PhantomParams
from .rpn import RpnConfig
from .unet import UNetConfig


class ConfigError(UsageError):
    pass


@dataclass
class DataConfig:
    n_train: int = 10
    n_test: int = 9
    dims: Tuple[int, ...] = DEFAULT_DIMS
    radius_range: Tuple[float, ...] = PhantomParams.radius_range
    interior_mean: float = PhantomParams.interior_mean
    rim_brightness: float = PhantomParams.rim_brightness
    background_mean: float = PhantomParams.background_mean
    background_texture: float = PhantomParams.background_texture
    distractors: int = PhantomParams.distractors
    distractor_mean: float = PhantomParams.distractor_mean
    speckle_scale: float = PhantomParams.speckle_scale
    speckle_grain: float = PhantomParams.speckle_grain

    def phantom_params(self) -> PhantomParams:
        names = {f.name for f in fields(PhantomParams)}
        return PhantomParams(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


@dataclass
class SgdConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    rpn_iters: int = 2000
    seg_iters: int = 3000
    checkpoint_every: int = 500
    rpn_log_every: int = 10
    seg_log_every: int = 1
    # slices drawn per RPN iteration; the 256-anchor minibatch is sampled across them
    rpn_slices_per_batch: int = 8
    # share of those slices drawn from object-bearing slices; 0 draws uniformly
    rpn_object_fraction: float = 0.75
    # random horizontal and vertical flips of detector training slices
    rpn_flip: bool = True
    # phantoms held out from training for checkpoint selection
    val_phantoms: int = 2
    # feed ground-truth boxes instead of detector proposals to the segmenter
    gt_attention: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _coerce(raw: str, default: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [p.strip() for p in raw.strip("()[]").split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in items)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None


def set_value(cfg: PipelineConfig, key: str, raw: str) -> None:
    parts = key.split(".")
    target = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(target) or p not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, p)
    name = parts[-1]
    if not dataclasses.is_dataclass(target) or name not in {f.name for f in fields(target)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(target, name)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"config key {key!r} names a section, not a field")
    setattr(target, name, _coerce(raw, current, key))


def parse_config(text: str, cfg: PipelineConfig = None) -> PipelineConfig:
    cfg = PipelineConfig() if cfg is None else cfg
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        set_value(cfg, key.strip(), value)
    validate(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def validate(cfg: PipelineConfig) -> None:
    """Field-level checks that would otherwise fail mid-training."""
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"config key {key!r}: {msg}")

    d = cfg.data
    need(len(d.dims) == 3 and min(d.dims) > 0, "data.dims", "needs three positive extents")
    f = 2 ** cfg.unet.depth
    for axis, s in zip("DHW", d.dims):
        need(s % f == 0, "data.dims", f"axis {axis} extent {s} not divisible by 2^unet.depth = {f}")
    r = cfg.rpn.downsample_factor
    for axis, s in zip("HW", d.dims[1:]):
        need(s % r == 0, "data.dims", f"slice axis {axis} extent {s} not divisible by the RPN stride {r}")
    need(len(d.radius_range) == 2 and 0 < d.radius_range[0] <= d.radius_range[1],
         "data.radius_range", "needs 0 < low <= high")
    need(d.n_train >= 1, "data.n_train", "must be at least 1")
    need(d.n_test >= 1, "data.n_test", "must be at least 1")
    need(d.speckle_scale >= 0, "data.speckle_scale", "must be non-negative")
    need(len(cfg.rpn.scales) * len(cfg.rpn.ratios) > 0, "rpn.scales", "need at least one anchor shape")
    need(all(v > 0 for v in cfg.rpn.scales + cfg.rpn.ratios), "rpn.scales", "scales and ratios must be positive")
    need(0 <= cfg.rpn.neg_iou <= cfg.rpn.pos_iou <= 1, "rpn.pos_iou", "need 0 <= neg_iou <= pos_iou <= 1")
    need(cfg.rpn.batch > 0, "rpn.batch", "must be positive")
    need(0 < cfg.rpn.pos_fraction <= 1, "rpn.pos_fraction", "must lie in (0, 1]")
    need(cfg.rpn.max_proposals_per_slice >= 1, "rpn.max_proposals_per_slice", "must be at least 1")
    need(cfg.rpn.backbone_init in ("he", "gaussian"), "rpn.backbone_init", "must be 'he' or 'gaussian'")
    need(cfg.unet.init in ("he", "gaussian"), "unet.init", "must be 'he' or 'gaussian'")
    need(cfg.unet.depth >= 1 and cfg.unet.base_channels >= 1, "unet.depth", "depth and base_channels must be positive")
    need(cfg.unet.num_labels >= 2, "unet.num_labels", "must be at least 2")
    need(cfg.sgd.lr > 0 and cfg.adam.lr > 0, "sgd.lr", "learning rates must be positive")
    t = cfg.train
    need(t.rpn_iters >= 0 and t.seg_iters >= 0, "train.seg_iters", "iteration counts must be non-negative")
    need(t.checkpoint_every >= 1, "train.checkpoint_every", "must be at least 1")
    need(t.rpn_log_every >= 1 and t.seg_log_every >= 1, "train.rpn_log_every", "log intervals must be positive")
    need(t.rpn_slices_per_batch >= 1, "train.rpn_slices_per_batch", "must be at least 1")
    need(0.0 <= t.rpn_object_fraction <= 1.0, "train.rpn_object_fraction", "must lie in [0, 1]")
    need(t.val_phantoms >= 0, "train.val_phantoms", "must be non-negative")


def flatten(cfg: PipelineConfig) -> Dict[str, Any]:
    out: Dict[str, Any] = {}

    def walk(obj, prefix):
        for f in fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(v):
                walk(v, key + ".")
            else:
                out[key] = v

    walk(cfg, "")
    return out


def dump_config(cfg: PipelineConfig) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in flatten(cfg).items())
