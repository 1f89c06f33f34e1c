"""End-to-end orchestration: data, detector training, segmenter training,
inference, evaluation and the three-way comparison.

Every source of randomness during training is a generator seeded from
``(global seed, stage, iteration)``, so a run resumed from a checkpoint at
iteration ``k`` replays exactly the draws an uninterrupted run would make.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import attention, geometry, metrics, phantom
from .checkpoint import Checkpoint, apply_checkpoint, load_checkpoint, save_checkpoint, to_bytes, make_checkpoint
from .config import PipelineConfig, flatten
from .errors import DimensionError, NumericalError, UsageError
from .optim import SGD, Adam
from .rpn import RpnModel, extract_proposals, rpn_forward, rpn_loss, sample_minibatch
from .tensor import Tensor, backward
from .unet import UNet3D, check_input, predict, seg_loss, unet_forward

log = logging.getLogger("segdet")

STAGE_RPN = 1
STAGE_SEG = 2
STAGE_VAL = 3
MODES = metrics.METHODS


def normalize_volume(volume) -> np.ndarray:
    """Map intensities from ``[0, 1]`` to ``[-1, 1]``."""
    return ((np.asarray(volume, dtype=np.float32) - np.float32(0.5)) * np.float32(2.0)).astype(np.float32)


def iteration_rng(seed: int, stage: int, it: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stage, int(it)])


@dataclass
class TrainResult:
    model: object
    log: List[Tuple[int, float]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    best_path: Optional[Path] = None
    val_log: List[Tuple[int, float]] = field(default_factory=list)


def _fill_missing_grads(params) -> None:
    # heads whose outputs were not sampled this step receive no gradient
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _check_finite(loss: float, stage: str, it: int) -> None:
    if not np.isfinite(loss):
        raise NumericalError(f"{stage} loss became {loss} at iteration {it}; "
                             "lower the learning rate or check the input volumes")


def _section_meta(cfg: PipelineConfig, prefix: str, **extra) -> dict:
    meta = {k: v for k, v in flatten(cfg).items() if k.startswith(prefix)}
    meta["seed"] = cfg.seed
    meta.update(extra)
    return meta


# -- data --------------------------------------------------------------------

def load_split(manifest, split: str) -> List[phantom.Phantom]:
    entries = [e for e in phantom.read_manifest(manifest) if e.split == split]
    return [phantom.load_entry(e) for e in entries]


def validation_phantoms(cfg: PipelineConfig) -> List[phantom.Phantom]:
    """Held-out phantoms used only for checkpoint selection."""
    n = cfg.train.val_phantoms
    if n == 0:
        return []
    rng = iteration_rng(cfg.seed, STAGE_VAL, 0)
    seeds = rng.choice(2**31 - 1, size=n, replace=False)
    return [phantom.gen_phantom(int(s), cfg.data.dims, cfg.data.phantom_params()) for s in seeds]


def collect_slices(phantoms: Sequence[phantom.Phantom]):
    """All D-slices of ``phantoms`` (normalized) with their gt boxes."""
    if not phantoms:
        raise UsageError("no training volumes")
    slices = np.concatenate([normalize_volume(ph.volume) for ph in phantoms], axis=0)
    boxes = [b for ph in phantoms for b in ph.gt_boxes]
    return slices, boxes


# -- detector ----------------------------------------------------------------

def _flip_box(b, code: int, height: int, width: int) -> tuple:
    x1, y1, x2, y2 = (float(v) for v in b)
    if code & 1:
        x1, x2 = width - x2, width - x1
    if code & 2:
        y1, y2 = height - y2, height - y1
    return (x1, y1, x2, y2)


def _flip_image(img: np.ndarray, code: int) -> np.ndarray:
    if code & 1:
        img = img[:, ::-1]
    if code & 2:
        img = img[::-1, :]
    return img


def train_rpn(cfg: PipelineConfig, slices: np.ndarray, boxes: Sequence, out: Optional[Path] = None,
              iters: Optional[int] = None, resume: Optional[Checkpoint] = None,
              prior_log: Sequence[Tuple[int, float]] = ()) -> TrainResult:
    """Train the detector on ``slices`` ``(N, H, W)`` with per-slice gt boxes.

    Each iteration draws ``train.rpn_slices_per_batch`` slices and samples the
    anchor minibatch across all of them.
    """
    iters = cfg.train.rpn_iters if iters is None else iters
    slices = np.asarray(slices, dtype=np.float32)
    if slices.ndim != 3 or len(slices) != len(boxes):
        raise DimensionError(f"expected (N, H, W) slices with N boxes, got {slices.shape} and {len(boxes)}")
    model = RpnModel(cfg.rpn, seed=cfg.seed)
    opt = SGD(model.params, lr=cfg.sgd.lr, momentum=cfg.sgd.momentum, weight_decay=cfg.sgd.weight_decay)
    start = 0
    result = TrainResult(model, list(prior_log))
    if resume is not None:
        apply_checkpoint(resume, model, opt)
        start = resume.iteration
        result.log = [(i, v) for i, v in result.log if i <= start]

    n, height, width = slices.shape
    grid = model.anchors(height, width)
    rc = cfg.rpn
    # labels[f][i]: slice i under flip code f (bit 0 flips x, bit 1 flips y)
    flips = range(4) if cfg.train.rpn_flip else range(1)
    labels = [[geometry.assign_labels(grid, [] if b is None else [_flip_box(b, f, height, width)],
                                      rc.pos_iou, rc.neg_iou) for b in boxes] for f in flips]
    per_batch = min(cfg.train.rpn_slices_per_batch, n)
    has_object = np.array([b is not None for b in boxes])
    obj, empty = np.flatnonzero(has_object), np.flatnonzero(~has_object)
    n_obj = min(len(obj), int(round(per_batch * cfg.train.rpn_object_fraction)))
    balanced = cfg.train.rpn_object_fraction > 0 and len(obj) > 0 and len(empty) > 0
    meta = _section_meta(cfg, "rpn.")

    for it in range(start, iters):
        rng = iteration_rng(cfg.seed, STAGE_RPN, it)
        if balanced:
            n_empty = min(len(empty), per_batch - n_obj)
            idx = np.sort(np.concatenate([rng.choice(obj, size=per_batch - n_empty, replace=False),
                                          rng.choice(empty, size=n_empty, replace=False)]))
        else:
            idx = np.sort(rng.choice(n, size=per_batch, replace=False))
        codes = rng.integers(len(flips), size=per_batch)
        picked = [labels[f][i] for f, i in zip(codes, idx)]
        batch_labels = geometry.AnchorLabels(
            np.concatenate([lab.labels for lab in picked]),
            np.concatenate([lab.matched_gt for lab in picked]),
            np.concatenate([lab.targets for lab in picked]),
        )
        sample = sample_minibatch(batch_labels, rc.batch, rc.pos_fraction, rng, rc.positives_only)
        batch = np.stack([_flip_image(slices[i], f) for f, i in zip(codes, idx)])
        model.zero_grad()
        cls, reg = rpn_forward(model, Tensor(batch[:, None]))
        loss = rpn_loss(cls, reg, batch_labels, sample, rc.regress_ignored)
        value = loss.item()
        _check_finite(value, "rpn", it + 1)
        backward(loss)
        _fill_missing_grads(model.params)
        opt.step()
        done = it + 1
        if done % cfg.train.rpn_log_every == 0:
            result.log.append((done, value))
            log.info("rpn iter %d loss %.5f", done, value)
        if out is not None and done % cfg.train.checkpoint_every == 0 and done < iters:
            path = out.with_name(f"{out.stem}_iter{done}{out.suffix}")
            save_checkpoint(path, model, done, opt, meta)
            result.checkpoints.append(path)
    if out is not None:
        save_checkpoint(out, model, max(iters, start), opt, meta)
        result.checkpoints.append(out)
    return result


def load_rpn(cfg: PipelineConfig, path) -> RpnModel:
    model = RpnModel(cfg.rpn, seed=cfg.seed)
    apply_checkpoint(load_checkpoint(path), model)
    return model


def detector_attention(rpn: RpnModel, volume) -> np.ndarray:
    """Attention volume from the detector's proposals on every slice."""
    vol = normalize_volume(volume)
    return attention.build_attention(extract_proposals(rpn, vol), vol.shape)


# -- segmenter ---------------------------------------------------------------

def seg_input(volume, mode: str, att: Optional[np.ndarray]) -> np.ndarray:
    """``[1, C, D, H, W]`` network input for ``mode``.

    ``att`` is the per-slice attention volume; mask3d mode replaces it with
    its tight 3D bounding box.
    """
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    chans = [normalize_volume(volume)]
    if mode != "plain":
        if att is None:
            raise UsageError(f"mode {mode!r} needs an attention volume")
        chans.append(att.astype(np.float32) if mode == "attention" else attention.build_3d_mask(att))
    return np.stack(chans)[None]


def guidance(cfg: PipelineConfig, mode: str, ph: phantom.Phantom, rpn: Optional[RpnModel]) -> Optional[np.ndarray]:
    """Attention source for one phantom: gt boxes, detector proposals, or none."""
    if mode == "plain":
        return None
    if cfg.train.gt_attention:
        return attention.attention_from_gt_boxes(ph.gt_boxes, ph.dims)
    if rpn is None:
        raise UsageError(f"mode {mode!r} needs a detector checkpoint (or train.gt_attention = true)")
    return detector_attention(rpn, ph.volume)


def unet_config(cfg: PipelineConfig, mode: str):
    return dataclasses.replace(cfg.unet, in_channels=1 if mode == "plain" else 2)


def mean_iou(model: UNet3D, inputs: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> float:
    return float(np.mean([metrics.iou_metric(predict(model, x), y) for x, y in zip(inputs, labels)]))


def train_seg(cfg: PipelineConfig, mode: str, phantoms: Sequence[phantom.Phantom],
              rpn: Optional[RpnModel] = None, out: Optional[Path] = None, iters: Optional[int] = None,
              val: Optional[Sequence[phantom.Phantom]] = None, resume: Optional[Checkpoint] = None,
              prior_log: Sequence[Tuple[int, float]] = (),
              prior_val: Sequence[Tuple[int, float]] = ()) -> TrainResult:
    """Train the U-Net with Adam on one sampled volume per iteration.

    Every ``train.checkpoint_every`` iterations a checkpoint is written and
    scored on the validation phantoms; the highest-scoring one (earliest on
    ties) is kept as ``<stem>.best.sgck``.
    """
    iters = cfg.train.seg_iters if iters is None else iters
    if not phantoms:
        raise UsageError("no training volumes")
    ucfg = unet_config(cfg, mode)
    for ph in phantoms:
        check_input(ucfg, (1, ucfg.in_channels) + tuple(ph.dims))
    model = UNet3D(ucfg, seed=cfg.seed)
    opt = Adam(model.params, lr=cfg.adam.lr, beta1=cfg.adam.beta1, beta2=cfg.adam.beta2, eps=cfg.adam.eps)
    result = TrainResult(model, list(prior_log), val_log=list(prior_val))
    start = 0
    if resume is not None:
        apply_checkpoint(resume, model, opt)
        start = resume.iteration
        result.log = [(i, v) for i, v in result.log if i <= start]
        result.val_log = [(i, v) for i, v in result.val_log if i <= start]

    inputs = [seg_input(ph.volume, mode, guidance(cfg, mode, ph, rpn)) for ph in phantoms]
    targets = [ph.labels.astype(np.int64)[None] for ph in phantoms]
    val = [] if val is None else list(val)
    val_inputs = [seg_input(ph.volume, mode, guidance(cfg, mode, ph, rpn)) for ph in val]
    val_labels = [ph.labels for ph in val]
    meta = _section_meta(cfg, "unet.", mode=mode, gt_attention=cfg.train.gt_attention)
    best_path = None if out is None else out.with_name(f"{out.stem}.best{out.suffix}")
    best = max((v for _, v in result.val_log), default=-1.0)

    for it in range(start, iters):
        rng = iteration_rng(cfg.seed, STAGE_SEG, it)
        j = int(rng.integers(len(inputs)))
        model.zero_grad()
        loss = seg_loss(unet_forward(model, Tensor(inputs[j])), targets[j])
        value = loss.item()
        _check_finite(value, f"segmentation ({mode})", it + 1)
        backward(loss)
        opt.step()
        done = it + 1
        if done % cfg.train.seg_log_every == 0:
            result.log.append((done, value))
        if done % 50 == 0:
            log.info("seg[%s] iter %d loss %.5f", mode, done, value)
        if out is not None and done % cfg.train.checkpoint_every == 0:
            ck = to_bytes(make_checkpoint(model, done, opt, meta))
            path = out.with_name(f"{out.stem}_iter{done}{out.suffix}")
            if done < iters:
                path.write_bytes(ck)
                result.checkpoints.append(path)
            if val_inputs:
                score = mean_iou(model, val_inputs, val_labels)
                result.val_log.append((done, score))
                log.info("seg[%s] iter %d validation IoU %.4f", mode, done, score)
                if score > best:
                    best = score
                    best_path.write_bytes(ck)
    if out is not None:
        save_checkpoint(out, model, max(iters, start), opt, meta)
        result.checkpoints.append(out)
        if best_path.exists():
            result.best_path = best_path
    return result


def load_seg(cfg: PipelineConfig, path, mode: Optional[str] = None) -> Tuple[UNet3D, str]:
    """Rebuild a segmenter from its checkpoint; the mode is read from the file when not given."""
    ck = load_checkpoint(path)
    stored = ck.meta.get("mode")
    if mode is None:
        mode = stored or "attention"
    elif stored is not None and stored != mode:
        raise UsageError(f"checkpoint {path} was trained in mode {stored!r}, not {mode!r}")
    model = UNet3D(unet_config(cfg, mode), seed=cfg.seed)
    apply_checkpoint(ck, model)
    return model, mode


# -- inference and evaluation -----------------------------------------------

def infer(seg: UNet3D, mode: str, volume, rpn: Optional[RpnModel] = None,
          att: Optional[np.ndarray] = None) -> Tuple[Optional[np.ndarray], np.ndarray]:
    """Detector then segmenter on one volume; returns ``(attention, labels)``."""
    volume = np.asarray(volume, dtype=np.float32)
    if volume.ndim != 3:
        raise DimensionError(f"expected a (D, H, W) volume, got shape {volume.shape}")
    check_input(seg.cfg, (1, seg.cfg.in_channels) + volume.shape)
    if att is None and mode != "plain":
        if rpn is None:
            raise UsageError(f"mode {mode!r} needs a detector checkpoint")
        att = detector_attention(rpn, volume)
    if att is not None and att.shape != volume.shape:
        raise DimensionError(f"attention dims {att.shape} differ from volume dims {volume.shape}")
    pred = predict(seg, seg_input(volume, mode, att))
    return att, pred


def evaluate(cfg: PipelineConfig, seg: UNet3D, mode: str, test: Sequence[phantom.Phantom],
             rpn: Optional[RpnModel] = None) -> metrics.EvalReport:
    ious = []
    for ph in test:
        att = guidance(cfg, mode, ph, rpn) if cfg.train.gt_attention else None
        _, pred = infer(seg, mode, ph.volume, rpn, att)
        ious.append(metrics.iou_metric(pred, ph.labels))
    return metrics.aggregate(mode, ious)


def write_report(report: metrics.EvalReport, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"report_{report.method}.tsv"
    path.write_text(report.kv_lines())
    return path


@dataclass
class CompareResult:
    reports: List[metrics.EvalReport]
    logs: dict
    table: str


def compare(cfg: PipelineConfig, train: Sequence[phantom.Phantom], test: Sequence[phantom.Phantom],
            out: Path, modes: Sequence[str] = MODES) -> CompareResult:
    """Train the detector once, then each segmenter mode from the same seed, and evaluate all."""
    out.mkdir(parents=True, exist_ok=True)
    rpn = None
    if not cfg.train.gt_attention and any(m != "plain" for m in modes):
        slices, boxes = collect_slices(train)
        rpn_res = train_rpn(cfg, slices, boxes, out / "rpn.sgck")
        metrics.write_loss_curve(out / "loss_rpn.tsv", rpn_res.log)
        rpn = rpn_res.model
    val = validation_phantoms(cfg)
    reports, logs = [], {}
    for mode in modes:
        res = train_seg(cfg, mode, train, rpn, out / f"seg_{mode}.sgck", val=val)
        metrics.write_loss_curve(out / f"loss_{mode}.tsv", res.log)
        logs[mode] = res.log
        seg = res.model
        if res.best_path is not None:
            seg, _ = load_seg(cfg, res.best_path, mode)
        report = evaluate(cfg, seg, mode, test, rpn)
        write_report(report, out)
        reports.append(report)
    table = metrics.comparison_table(reports)
    (out / "comparison.txt").write_text(table)
    return CompareResult(reports, logs, table)
