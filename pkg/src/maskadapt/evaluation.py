"""Confusion matrices, IoU/mIoU, boundary F1 and ablation tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .numerics import IGNORE_INDEX
from .synthdata import CLASS_NAMES

REPORT_HEADER = ["variant", "seed", "iou_background", "iou_crop", "iou_weed", "miou", "boundary_f1"]


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = int(num_classes)
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def accumulate(self, pred, true, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise ValueError(f"prediction shape {pred.shape} != label shape {true.shape}")
        keep = true != ignore_index
        p, t = pred[keep].astype(np.int64), true[keep].astype(np.int64)
        k = self.num_classes
        if p.size and (p.min() < 0 or p.max() >= k or t.min() < 0 or t.max() >= k):
            raise ValueError(f"labels must lie in [0, {k}) or equal ignore_index")
        counts = self.counts + np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return ConfusionMatrix(k, counts)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class IoUReport:
    per_class: list  # float or None (undefined, zero union)
    miou: float

    def as_dict(self, names=CLASS_NAMES) -> dict:
        out = {f"iou_{n}": v for n, v in zip(names, self.per_class)}
        out["miou"] = self.miou
        return out


def iou(cm: ConfusionMatrix) -> IoUReport:
    """Per-class IoU; classes with empty union are undefined and left out of the mean."""
    if cm.total == 0:
        raise ValueError("no pixels evaluated")
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - inter
    per = [float(i / u) if u > 0 else None for i, u in zip(inter, union)]
    defined = [v for v in per if v is not None]
    return IoUReport(per, float(np.mean(defined)))


def boundary_map(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of a different class."""
    b = np.zeros(labels.shape, dtype=bool)
    dx = labels[:, 1:] != labels[:, :-1]
    dy = labels[1:, :] != labels[:-1, :]
    b[:, 1:] |= dx
    b[:, :-1] |= dx
    b[1:, :] |= dy
    b[:-1, :] |= dy
    return b


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    # square window of half-width r
    if r <= 0:
        return mask.copy()
    p = np.pad(mask, r)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out |= p[dy:dy + h, dx:dx + w]
    return out


def boundary_f1(pred, true, radius: int = 1) -> float:
    """F1 of boundary pixels matched within a window.

    ``radius`` counts the pixel itself: radius 1 requires exact coincidence,
    radius r accepts a match within Chebyshev distance ``r - 1``.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    bp, bt = boundary_map(np.asarray(pred)), boundary_map(np.asarray(true))
    if not bp.any() and not bt.any():
        return 1.0
    if not bp.any() or not bt.any():
        return 0.0
    precision = (bp & _dilate(bt, radius - 1)).sum() / bp.sum()
    recall = (bt & _dilate(bp, radius - 1)).sum() / bt.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


# -- ablation tables -------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    n: int
    miou_mean: float
    miou_std: float
    boundary_f1_mean: float


def _final(log: dict) -> dict:
    evals = log["evals"]
    if not evals:
        raise ValueError(f"run {log.get('variant')}/{log.get('seed')} has no evaluation events")
    return evals[-1]


def compare_runs(logs: list) -> list:
    """Final-eval mIoU mean and population std per variant, sorted by variant name.

    Each log is ``{"variant": str, "seed": int, "evals": [eval events]}``.
    """
    if not logs:
        return []
    schedule = [e["iteration"] for e in logs[0]["evals"]]
    for log in logs:
        if [e["iteration"] for e in log["evals"]] != schedule:
            raise ValueError(f"run {log['variant']}/{log['seed']} has a different eval schedule")
    groups: dict = {}
    for log in logs:
        groups.setdefault(log["variant"], []).append(_final(log))
    rows = []
    for variant in sorted(groups):
        finals = groups[variant]
        m = np.array([f["miou"] for f in finals])
        bf = np.array([f.get("boundary_f1", float("nan")) for f in finals])
        rows.append(AblationRow(variant, len(finals), float(m.mean()), float(m.std()), float(bf.mean())))
    return rows


def format_table(rows: list) -> str:
    lines = [f"{'variant':<24} {'n':>3} {'mIoU':>8} {'std':>7} {'bF1':>7}"]
    for r in rows:
        lines.append(f"{r.variant:<24} {r.n:>3} {100 * r.miou_mean:8.2f} {100 * r.miou_std:7.2f} "
                     f"{r.boundary_f1_mean:7.3f}")
    return "\n".join(lines)


def table_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "n", "miou_mean", "miou_std", "boundary_f1_mean"])
    for r in rows:
        w.writerow([r.variant, r.n, f"{r.miou_mean:.6f}", f"{r.miou_std:.6f}", f"{r.boundary_f1_mean:.6f}"])
    return buf.getvalue()


def report_csv(logs: list) -> str:
    """Per-run final metrics in the fixed report layout."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for log in sorted(logs, key=lambda g: (g["variant"], g["seed"])):
        f = _final(log)

        def fmt(v):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"

        w.writerow([log["variant"], log["seed"], fmt(f.get("iou_background")), fmt(f.get("iou_crop")),
                    fmt(f.get("iou_weed")), fmt(f["miou"]), fmt(f.get("boundary_f1"))])
    return buf.getvalue()
