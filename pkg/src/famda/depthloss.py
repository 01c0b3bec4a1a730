"""Median-based scale/shift-invariant depth normalization and loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridcore import DepthMap, mean_abs_dev_from_median, median

DEGENERATE_SCALE = 1e-8


@dataclass(frozen=True)
class SsiStats:
    med: float
    scale: float
    valid_count: int


def normalize_values(values: np.ndarray) -> tuple[np.ndarray, SsiStats]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no valid depth")
    med = median(values)
    scale = mean_abs_dev_from_median(values)
    stats = SsiStats(med, scale, int(values.size))
    if scale < DEGENERATE_SCALE:
        return np.zeros_like(values), stats
    return (values - med) / scale, stats


def ssi_normalize(depth: DepthMap, mask: np.ndarray | None = None) -> tuple[np.ndarray, SsiStats]:
    """Normalized values over the valid (and masked) pixels, in row-major order."""
    return normalize_values(depth.values(mask))


def _joint(pred: DepthMap, pseudo: DepthMap) -> np.ndarray:
    if pred.shape != pseudo.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {pseudo.shape}")
    joint = pred.valid & pseudo.valid
    if not joint.any():
        raise ValueError("no jointly valid depth pixels")
    return joint


def _ssi_parts(pred, pseudo):
    joint = _joint(pred, pseudo)
    sp, pstats = normalize_values(pred.data[joint])
    sq, _ = normalize_values(pseudo.data[joint])
    diff = sp - sq
    loss = float(np.sqrt(np.mean(diff * diff)))
    return joint, diff, pstats, loss


def ssi_rmse_loss(pred: DepthMap, pseudo: DepthMap) -> float:
    return _ssi_parts(pred, pseudo)[3]


def ssi_rmse_grad(pred: DepthMap, pseudo: DepthMap) -> np.ndarray:
    """d loss / d pred with both maps' median and scale held fixed."""
    return ssi_rmse_loss_and_grad(pred, pseudo)[1]


def ssi_rmse_loss_and_grad(pred: DepthMap, pseudo: DepthMap) -> tuple[float, np.ndarray]:
    joint, diff, pstats, loss = _ssi_parts(pred, pseudo)
    grad = np.zeros(pred.shape)
    if loss > 0.0 and pstats.scale >= DEGENERATE_SCALE:
        grad[joint] = diff / (diff.size * loss * pstats.scale)
    return loss, grad


def plain_rmse_loss_and_grad(pred: DepthMap, pseudo: DepthMap) -> tuple[float, np.ndarray]:
    """Unnormalized RMSE in the pseudo-depth's own units (ablation only)."""
    joint = _joint(pred, pseudo)
    diff = pred.data[joint] - pseudo.data[joint]
    loss = float(np.sqrt(np.mean(diff * diff)))
    grad = np.zeros(pred.shape)
    if loss > 0.0:
        grad[joint] = diff / (diff.size * loss)
    return loss, grad


def _median_weights(values: np.ndarray) -> np.ndarray:
    """d median / d value: 1 on the middle element, 1/2 on each of two middles."""
    order = np.argsort(values, kind="stable")
    n = values.size
    w = np.zeros(n)
    if n % 2:
        w[order[n // 2]] = 1.0
    else:
        w[order[n // 2 - 1]] = 0.5
        w[order[n // 2]] = 0.5
    return w


def ssi_rmse_loss_and_grad_exact(pred: DepthMap, pseudo: DepthMap) -> tuple[float, np.ndarray]:
    """Loss and its gradient with the prediction's median and scale differentiated.

    Valid wherever the median element is unique. The result sums to zero and
    is orthogonal to the prediction itself, so it never moves the
    prediction's offset or scale to first order.
    """
    joint, diff, pstats, loss = _ssi_parts(pred, pseudo)
    grad = np.zeros(pred.shape)
    if loss == 0.0 or pstats.scale < DEGENERATE_SCALE:
        return loss, grad
    x = pred.data[joint]
    n = x.size
    u = (x - pstats.med) / pstats.scale
    r = diff / (n * loss)
    e = _median_weights(x)
    sgn = np.sign(x - pstats.med)
    ds = (sgn - sgn.sum() * e) / n
    grad[joint] = (r - e * r.sum() - np.dot(r, u) * ds) / pstats.scale
    return loss, grad
