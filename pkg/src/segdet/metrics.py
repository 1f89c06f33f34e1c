"""Segmentation IoU, Table-1 style reports and loss-curve export."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import InputError

METHODS = ("plain", "mask3d", "attention")
METHOD_TITLES = {"plain": "3D U-Net", "mask3d": "3D mask", "attention": "2D attention"}


def iou_metric(pred, gt) -> float:
    """TP / (TP + FP + FN) over binary masks; 1.0 when both are empty."""
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    if p.shape != g.shape:
        raise InputError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


@dataclass
class EvalReport:
    method: str
    ious: List[float] = field(default_factory=list)

    @property
    def best(self) -> float:
        return max(self.ious)

    @property
    def worst(self) -> float:
        return min(self.ious)

    @property
    def mean(self) -> float:
        return float(np.mean(np.asarray(self.ious, dtype=np.float64)))

    def kv_lines(self) -> str:
        rows = [f"method\t{self.method}", f"n\t{len(self.ious)}"]
        rows += [f"iou_{i}\t{v:.9g}" for i, v in enumerate(self.ious)]
        rows += [f"best\t{self.best:.9g}", f"worst\t{self.worst:.9g}", f"mean\t{self.mean:.9g}"]
        return "\n".join(rows) + "\n"


def aggregate(method: str, ious: Iterable[float]) -> EvalReport:
    ious = [float(v) for v in ious]
    if not ious:
        raise InputError("cannot aggregate an empty IoU list")
    return EvalReport(method, ious)


def comparison_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table with one row per method and best/worst/average columns."""
    head = f"{'Method':<14}{'Best IoU':>10}{'Worst IoU':>11}{'Average IoU':>13}"
    lines = [head, "-" * len(head)]
    for r in reports:
        title = METHOD_TITLES.get(r.method, r.method)
        lines.append(f"{title:<14}{r.best:>10.3f}{r.worst:>11.3f}{r.mean:>13.3f}")
    return "\n".join(lines) + "\n"


def write_loss_curve(path, log: Sequence[Tuple[int, float]]) -> None:
    """Write ``iter<TAB>loss`` rows (9 significant digits, enough to round-trip float32)."""
    Path(path).write_text("".join(f"{int(i)}\t{float(v):.9g}\n" for i, v in log))


def read_loss_curve(path) -> List[Tuple[int, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            i, v = line.split("\t")
            out.append((int(i), float(v)))
    return out


def read_kv(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("\t", 1)
            out[k] = v
    return out
