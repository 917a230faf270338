"""Heatmap regression loss with online hard keypoint mining."""

from __future__ import annotations

import numpy as np

from ..autograd import functional as F
from ..autograd.functional import ShapeError
from ..autograd.tensor import Tensor


def per_keypoint_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over the H, W cells of each channel: [N, K]."""
    if tuple(pred.shape) != tuple(np.shape(target)):
        raise ShapeError(f"prediction {pred.shape} and target {np.shape(target)} differ")
    if pred.ndim != 4:
        raise ShapeError(f"expected [N, K, H, W] heatmaps, got {pred.shape}")
    diff = F.sub(pred, Tensor(np.asarray(target, dtype=pred.dtype)))
    cells = pred.shape[2] * pred.shape[3]
    return F.mul(F.sum_axes(F.square(diff), (2, 3)), 1.0 / cells)


def ohkm_weights(losses: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    """Constant weights selecting the k hardest visible keypoints per sample.

    Each selected keypoint of a contributing sample gets ``1 / (k_n * N_valid)``
    where ``k_n = min(k, visible count)``. Samples with nothing visible get 0.
    Ties keep the lower keypoint index.
    """
    if k < 1:
        raise ValueError(f"ohkm k must be >= 1, got {k}")
    losses = np.asarray(losses, dtype=np.float64)
    vis = np.asarray(mask, dtype=bool).reshape(losses.shape)
    w = np.zeros(losses.shape, np.float64)
    valid = np.flatnonzero(vis.any(axis=1))
    for n in valid:
        idx = np.flatnonzero(vis[n])
        order = idx[np.argsort(-losses[n, idx], kind="stable")][:k]
        w[n, order] = 1.0 / (len(order) * len(valid))
    return w


def ohkm_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, k: int = 8) -> Tensor:
    """Mean of the k largest per-keypoint MSEs per sample, averaged over samples.

    Invisible keypoints (``mask == 0``) never count; samples without visible
    keypoints are skipped.
    """
    if k < 1:
        raise ValueError(f"ohkm k must be >= 1, got {k}")
    per_kp = per_keypoint_mse(pred, target)
    w = ohkm_weights(per_kp.data, mask, k)
    return F.sum(F.mul(per_kp, Tensor(w.astype(per_kp.dtype))))
