"""Evaluation: confusion-matrix mIoU and range-masked, median-scaled depth RMSE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridcore import IGNORE, DepthMap, LabelMap, median


@dataclass(frozen=True)
class DepthEvalConfig:
    min_depth: float = 1e-3
    max_depth: float = 80.0

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")


def depth_valid_mask(gt: DepthMap, cfg: DepthEvalConfig = DepthEvalConfig()) -> np.ndarray:
    """Scored pixels: valid ground truth inside [min_depth, max_depth]."""
    with np.errstate(invalid="ignore"):
        in_range = (gt.data >= cfg.min_depth) & (gt.data <= cfg.max_depth)
    return gt.valid & in_range


def median_scale(pred: DepthMap, gt: DepthMap, mask: np.ndarray) -> DepthMap:
    """Rescale ``pred`` on ``mask`` by med(gt) / med(pred) over the mask."""
    mask = mask & pred.valid & gt.valid
    if not mask.any():
        raise ValueError("empty mask")
    pred_med = median(pred.data[mask])
    if pred_med == 0.0:
        raise ValueError("degenerate prediction median")
    ratio = median(gt.data[mask]) / pred_med
    out = np.where(mask, pred.data * ratio, np.nan)
    return DepthMap(out, mask)


def masked_rmse(a: DepthMap, b: DepthMap, mask: np.ndarray) -> float:
    if not mask.any():
        raise ValueError("empty mask")
    diff = a.data[mask] - b.data[mask]
    return float(np.sqrt(np.mean(diff * diff)))


def evaluate_depth(pred: DepthMap, gt: DepthMap, cfg: DepthEvalConfig = DepthEvalConfig()) -> float:
    mask = depth_valid_mask(gt, cfg) & pred.valid
    if not mask.any():
        raise ValueError("empty mask")
    scaled = median_scale(pred, gt, mask)
    return masked_rmse(scaled, gt, mask)


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns prediction; IGNORE gt pixels are skipped.

    A scored pixel predicted as IGNORE lands in ``missed`` (a false negative
    for its gt class with no false positive).
    """

    num_classes: int
    counts: np.ndarray = None
    missed: np.ndarray = None

    def __post_init__(self):
        c = self.num_classes
        if self.counts is None:
            self.counts = np.zeros((c, c), dtype=np.int64)
        if self.missed is None:
            self.missed = np.zeros(c, dtype=np.int64)

    def add(self, pred: LabelMap, gt: LabelMap) -> "ConfusionMatrix":
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
        if pred.num_classes != self.num_classes or gt.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        c = self.num_classes
        scored = gt.data != IGNORE
        g = gt.data[scored]
        p = pred.data[scored]
        hit = p != IGNORE
        self.counts += np.bincount(g[hit] * c + p[hit], minlength=c * c).reshape(c, c)
        self.missed += np.bincount(g[~hit], minlength=c)
        return self

    def __iadd__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts = self.counts + other.counts
        self.missed = self.missed + other.missed
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.missed.sum())

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from both gt and prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        fn = self.counts.sum(axis=1) - tp + self.missed
        fp = self.counts.sum(axis=0) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def miou(self) -> float:
        if self.total == 0:
            raise ValueError("no scored pixels")
        return float(np.nanmean(self.per_class_iou()))


def miou(pred: LabelMap, gt: LabelMap) -> tuple[list[float], float]:
    cm = ConfusionMatrix(gt.num_classes).add(pred, gt)
    return cm.per_class_iou().tolist(), cm.miou()
