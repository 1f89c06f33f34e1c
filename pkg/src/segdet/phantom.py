"""Synthetic ultrasound-like phantoms and the SVOL volume format.

A phantom is a hypoechoic ellipsoid (the segmentation target) wrapped in a
one-voxel bright rim, placed in a textured background with a few dark
rimless distractor blobs, then corrupted by multiplicative Rayleigh speckle.
Slices for the detector are taken along the first (D) axis.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, InputError
from .geometry import Box

DEFAULT_DIMS = (32, 48, 32)
SVOL_MAGIC = b"SVOL"
SVOL_HEADER = struct.Struct("<4sIII")
MAX_VOXELS = 1 << 28


@dataclass(frozen=True)
class PhantomParams:
    radius_range: tuple = (4.0, 9.0)
    interior_mean: float = 0.2
    rim_brightness: float = 0.9
    background_mean: float = 0.5
    background_texture: float = 0.12
    distractors: int = 3
    distractor_mean: float = 0.25
    # coefficient of variation of the speckle factor; 0 disables noise
    speckle_scale: float = 0.5
    # spatial correlation (voxels) of the speckle grain
    speckle_grain: float = 0.7


@dataclass
class Phantom:
    volume: np.ndarray  # float32 (D, H, W) in [0, 1]
    labels: np.ndarray  # uint8 (D, H, W) in {0, 1}
    gt_boxes: List[Optional[Box]]
    seed: int
    center: tuple = ()
    semi_axes: tuple = ()
    mirrored: bool = False

    @property
    def dims(self) -> tuple:
        return self.volume.shape


def _ellipsoid(shape, center, axes) -> np.ndarray:
    zz, yy, xx = np.indices(shape, dtype=np.float64)
    r = ((zz - center[0]) / axes[0]) ** 2 + ((yy - center[1]) / axes[1]) ** 2 + ((xx - center[2]) / axes[2]) ** 2
    return r <= 1.0


def gen_phantom(seed: int, dims: Sequence[int] = DEFAULT_DIMS, params: PhantomParams = PhantomParams(),
                max_attempts: int = 100) -> Phantom:
    """Generate one phantom; identical seeds give bit-identical output."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) <= 0:
        raise InputError(f"dims must be three positive extents, got {dims}")
    rng = np.random.default_rng(seed)
    lo, hi = params.radius_range
    for _ in range(max_attempts):
        axes = tuple(rng.uniform(lo, hi, size=3))
        # rim needs one voxel of room on every side
        room = [(a + 1.0, d - 2.0 - a) for a, d in zip(axes, dims)]
        if any(lo_c > hi_c for lo_c, hi_c in room):
            continue
        center = tuple(rng.uniform(lo_c, hi_c) for lo_c, hi_c in room)
        labels = _ellipsoid(dims, center, axes)
        if labels.any():
            break
    else:
        raise InputError(f"could not fit an ellipsoid in {dims} after {max_attempts} attempts")

    rim = ndimage.binary_dilation(labels) & ~labels

    texture = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=2.0)
    texture /= max(texture.std(), 1e-12)
    clean = params.background_mean + params.background_texture * texture
    for _ in range(params.distractors):
        dax = rng.uniform(lo * 0.5, hi * 0.6, size=3)
        dc = rng.uniform(0, 1, size=3) * np.asarray(dims)
        blob = _ellipsoid(dims, dc, dax) & ~ndimage.binary_dilation(labels, iterations=3)
        clean[blob] = params.distractor_mean
    clean[labels] = params.interior_mean
    clean[rim] = params.rim_brightness

    if params.speckle_scale > 0:
        r = rng.rayleigh(1.0, size=dims)
        if params.speckle_grain > 0:
            r = ndimage.gaussian_filter(r, sigma=params.speckle_grain)
        # speckle_scale is the coefficient of variation of the multiplicative factor
        factor = 1.0 + params.speckle_scale * (r - r.mean()) / max(r.std(), 1e-12)
        clean = clean * np.clip(factor, 0.0, None)
    volume = np.clip(clean, 0.0, 1.0).astype(np.float32)
    labels_u8 = labels.astype(np.uint8)
    return Phantom(volume, labels_u8, derive_gt_boxes(labels_u8), int(seed), center, axes)


def mirror(ph: Phantom) -> Phantom:
    """Left/right flip along the width axis."""
    labels = np.ascontiguousarray(ph.labels[:, :, ::-1])
    w = ph.dims[2]
    center = (ph.center[0], ph.center[1], w - 1 - ph.center[2]) if ph.center else ()
    return Phantom(np.ascontiguousarray(ph.volume[:, :, ::-1]), labels, derive_gt_boxes(labels),
                   ph.seed, center, ph.semi_axes, not ph.mirrored)


def derive_gt_boxes(labels: np.ndarray) -> List[Optional[Box]]:
    """Tight box of each slice's foreground (``None`` for empty slices)."""
    boxes: List[Optional[Box]] = []
    for sl in np.asarray(labels):
        ys, xs = np.nonzero(sl)
        if len(ys) == 0:
            boxes.append(None)
        else:
            boxes.append(Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)))
    return boxes


# -- SVOL files ------------------------------------------------------------

def write_svol(path, volume: np.ndarray) -> None:
    vol = np.asarray(volume)
    if vol.ndim != 3 or min(vol.shape) <= 0:
        raise InputError(f"SVOL stores non-empty 3D volumes, got shape {vol.shape}")
    payload = np.ascontiguousarray(vol, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(SVOL_HEADER.pack(SVOL_MAGIC, *vol.shape))
        fh.write(payload)


def read_svol(path) -> np.ndarray:
    """Read an SVOL file as a float32 ``(D, H, W)`` array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != SVOL_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {SVOL_MAGIC!r}", offset=0)
    if len(raw) < SVOL_HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    _, d, h, w = SVOL_HEADER.unpack_from(raw)
    if d == 0 or h == 0 or w == 0:
        raise FormatError(f"{path}: zero extent in dims {(d, h, w)}", offset=4)
    if d * h * w > MAX_VOXELS:
        raise FormatError(f"{path}: dims {(d, h, w)} overflow the voxel limit", offset=4)
    need = SVOL_HEADER.size + 4 * d * h * w
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload, expected {need} bytes", offset=len(raw))
    if len(raw) > need:
        raise FormatError(f"{path}: trailing bytes after payload", offset=need)
    data = np.frombuffer(raw, dtype="<f4", offset=SVOL_HEADER.size, count=d * h * w)
    return data.astype(np.float32).reshape(d, h, w)


# -- datasets --------------------------------------------------------------

@dataclass
class ManifestEntry:
    split: str
    volume_path: str
    label_path: str


@dataclass
class Dataset:
    train: List[Phantom] = field(default_factory=list)
    test: List[Phantom] = field(default_factory=list)


def make_dataset(n_train: int = 10, n_test: int = 9, seed: int = 0, dims: Sequence[int] = DEFAULT_DIMS,
                 params: PhantomParams = PhantomParams()) -> Dataset:
    """Disjoint-seed train/test phantoms; the second half of the training set is mirrored."""
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2**31 - 1, size=n_train + n_test, replace=False)
    ds = Dataset()
    for i, s in enumerate(seeds[:n_train]):
        ph = gen_phantom(int(s), dims, params)
        ds.train.append(mirror(ph) if i >= n_train - n_train // 2 else ph)
    for s in seeds[n_train:]:
        ds.test.append(gen_phantom(int(s), dims, params))
    return ds


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Write SVOL pairs plus ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for split, items in (("train", ds.train), ("test", ds.test)):
        for i, ph in enumerate(items):
            stem = f"{split}_{i:02d}_{ph.seed}{'m' if ph.mirrored else ''}"
            vol_name = f"{stem}_vol.svol"
            lab_name = f"{stem}_lab.svol"
            write_svol(out / vol_name, ph.volume)
            write_svol(out / lab_name, ph.labels.astype(np.float32))
            lines.append(f"{split}\t{vol_name}\t{lab_name}\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(lines))
    return manifest


def read_manifest(path) -> List[ManifestEntry]:
    """Parse a manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] not in ("train", "test", "val"):
            raise FormatError(f"{path}:{lineno}: expected '<split>\\t<volume>\\t<labels>'")
        split, vol, lab = parts
        entries.append(ManifestEntry(split, os.fspath(base / vol), os.fspath(base / lab)))
    return entries


def load_entry(entry: ManifestEntry) -> Phantom:
    volume = read_svol(entry.volume_path)
    labels = read_svol(entry.label_path)
    if labels.shape != volume.shape:
        raise FormatError(f"label dims {labels.shape} differ from volume dims {volume.shape}")
    lab = (labels > 0.5).astype(np.uint8)
    return Phantom(volume, lab, derive_gt_boxes(lab), seed=-1)
