"""Test-time pipeline: crop, forward, optional flip averaging, blur, decode."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .autograd.tensor import Tensor, no_grad
from .codec import BLUR_SIGMA, DEFAULT_STRIDE, CropTransform, KeypointSet, blur, box_to_crop, decode, flip_average, \
    flip_pairs_for, warp_image
from .imaging import normalize
from .model import DANet


def predict_heatmaps(model: DANet, crops: np.ndarray, flip: bool = False,
                     pairs: Optional[Sequence[Tuple[int, int]]] = None) -> np.ndarray:
    """Heatmaps for [N, 3, H, W] crops with values in [0, 1]; eval-mode forward."""
    if pairs is None:
        pairs = flip_pairs_for(model.config.keypoints)
    x = normalize(crops)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            h = model(Tensor(x)).data.astype(np.float64)
            if flip:
                hf = model(Tensor(np.ascontiguousarray(x[..., ::-1]))).data.astype(np.float64)
                h = flip_average(h, hf, pairs)
    finally:
        model.train(was_training)
    return h


def decode_batch(heatmaps: np.ndarray, transforms: Optional[Sequence[CropTransform]] = None,
                 blur_sigma: Optional[float] = BLUR_SIGMA, stride: int = DEFAULT_STRIDE):
    out = []
    for i, h in enumerate(heatmaps):
        if blur_sigma:
            h = blur(h, blur_sigma)
        out.append(decode(h, None if transforms is None else transforms[i], stride=stride))
    return out


def clamp_box(box: Sequence[float], width: int, height: int) -> Tuple[Tuple[float, ...], bool]:
    """Intersect an (x, y, w, h) box with the image; returns (box, changed)."""
    x, y, w, h = (float(v) for v in box)
    x0, y0 = max(0.0, x), max(0.0, y)
    x1, y1 = min(float(width), x + w), min(float(height), y + h)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {tuple(box)} does not overlap the {width}x{height} image")
    out = (x0, y0, x1 - x0, y1 - y0)
    return out, out != (x, y, w, h)


def estimate_pose(model: DANet, image: np.ndarray, box: Sequence[float], flip: bool = True,
                  blur_sigma: Optional[float] = BLUR_SIGMA) -> KeypointSet:
    """Keypoints in original-image pixels for one [H, W, 3] uint8 image and box."""
    t = box_to_crop(box, target=tuple(model.config.input_size))
    crop = warp_image(np.asarray(image, np.float32) / 255.0, t)
    h = predict_heatmaps(model, crop[None], flip=flip)
    return decode_batch(h, [t], blur_sigma, stride=DEFAULT_STRIDE)[0]
