"""Confusion-matrix mIoU over class subsets and the seen/unseen hIoU."""

from __future__ import annotations

import csv
import json
from typing import Iterable, Sequence

import numpy as np

from mvpseg.maskhead import IGNORE


class Confusion:
    """C x C pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, C: int):
        self.C = C
        self.counts = np.zeros((C, C), dtype=np.int64)

    def add(self, gt: np.ndarray, pred: np.ndarray) -> Confusion:
        gt = np.asarray(gt).ravel()
        pred = np.asarray(pred).ravel()
        if gt.shape != pred.shape:
            raise ValueError(f"gt {gt.shape} and prediction {pred.shape} differ in size")
        keep = gt != IGNORE
        gt, pred = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
        if gt.size and (gt.min() < 0 or gt.max() >= self.C or pred.min() < 0 or pred.max() >= self.C):
            raise ValueError(f"labels outside [0, {self.C})")
        self.counts += np.bincount(gt * self.C + pred, minlength=self.C * self.C).reshape(self.C, self.C)
        return self

    def __add__(self, other: Confusion) -> Confusion:
        out = Confusion(self.C)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou_parts(self) -> tuple[np.ndarray, np.ndarray]:
        """(intersection, union) per class."""
        tp = np.diag(self.counts)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        return tp, union

    def per_class_iou(self) -> list[float | None]:
        """IoU per class; None where the class never occurs in gt or prediction."""
        tp, union = self.iou_parts()
        return [float(t / u) if u > 0 else None for t, u in zip(tp, union)]


def miou(conf: Confusion, subset: Iterable[int]) -> float:
    """Mean IoU over ``subset``.

    Classes whose union is empty (absent from both ground truth and
    prediction) are left out of the mean instead of counting as zero.
    """
    subset = list(subset)
    if not subset:
        raise ValueError("subset must be nonempty")
    ious = [v for c, v in enumerate(conf.per_class_iou()) if c in subset and v is not None]
    if not ious:
        raise ValueError("no support")
    return float(np.mean(ious))


def hiou(miou_u: float, miou_s: float) -> float:
    if miou_u < 0 or miou_s < 0:
        raise ValueError("mIoU values must be nonnegative")
    if miou_u + miou_s == 0:
        return 0.0
    # ratio is exactly 1 when the arguments are equal, so hiou(x, x) == x
    return miou_u * (2.0 * miou_s / (miou_u + miou_s))


def report(conf: Confusion, seen: Sequence[int], unseen: Sequence[int]) -> dict:
    def safe(subset):
        try:
            return miou(conf, subset)
        except ValueError:
            return 0.0

    m_s, m_u = safe(seen), safe(unseen)
    return {
        "miou_seen": m_s,
        "miou_unseen": m_u,
        "miou_all": safe(range(conf.C)),
        "hiou": hiou(m_u, m_s),
        "per_class_iou": conf.per_class_iou(),
    }


def write_report(rep: dict, path: str) -> None:
    """JSON if ``path`` ends in .json, otherwise a two-column CSV."""
    if path.endswith(".json"):
        with open(path, "w") as f:
            json.dump(rep, f, indent=2)
        return
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for key in ("miou_seen", "miou_unseen", "miou_all", "hiou"):
            w.writerow([key, repr(rep[key])])
        for c, v in enumerate(rep["per_class_iou"]):
            w.writerow([f"iou_class{c}", "" if v is None else repr(v)])
