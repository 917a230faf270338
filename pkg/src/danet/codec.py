"""Heatmap targets, test-time decoding and box-to-crop geometry.

Coordinates follow the pixel-index convention: pixel (i, j) has its centre at
x = j, y = i. A keypoint at crop pixel x sits at heatmap cell u = x / stride,
and a horizontal image flip maps x to W - 1 - x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

COCO_KEYPOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
COCO_FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))

MPII_KEYPOINTS = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax",
    "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
)
MPII_FLIP_PAIRS = ((0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13))

TARGET_SIGMA = 2.0
BLUR_SIGMA = 1.0
DEFAULT_STRIDE = 4


def flip_pairs_for(num_keypoints: int) -> Tuple[Tuple[int, int], ...]:
    if num_keypoints == 17:
        return COCO_FLIP_PAIRS
    if num_keypoints == 16:
        return MPII_FLIP_PAIRS
    return ()


def flip_permutation(pairs: Sequence[Tuple[int, int]], num_channels: int) -> np.ndarray:
    """Channel permutation swapping each pair; rejects out-of-range or repeated indices."""
    perm = np.arange(num_channels)
    seen = set()
    for a, b in pairs:
        for idx in (a, b):
            if not 0 <= idx < num_channels:
                raise ValueError(f"flip pair index {idx} out of range for {num_channels} channels")
            if idx in seen:
                raise ValueError(f"flip pair index {idx} appears twice")
            seen.add(idx)
        perm[a], perm[b] = b, a
    return perm


def mirror_heatmaps(h: np.ndarray, pairs: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Reverse the width axis and swap left/right channels; an involution."""
    perm = flip_permutation(pairs, h.shape[-3])
    return np.ascontiguousarray(h[..., perm, :, ::-1])


def _shift_right(h: np.ndarray) -> np.ndarray:
    out = h.copy()
    out[..., 1:] = h[..., :-1]
    return out


def flip_heatmaps(h: np.ndarray, pairs: Sequence[Tuple[int, int]]) -> np.ndarray:
    """The maps a model consistent with ``h`` would produce for the flipped image.

    ``flip_average(h, flip_heatmaps(h, pairs), pairs)`` returns ``h`` on every
    column but the first.
    """
    g = h.copy()
    g[..., :-1] = h[..., 1:]
    return mirror_heatmaps(g, pairs)


def flip_average(h: np.ndarray, h_flipped: np.ndarray, pairs: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Mean of ``h`` and the mirrored, channel-swapped, one-cell-shifted ``h_flipped``.

    A W-cell map predicted on a mirrored image is offset by about one cell
    (0.75 at stride 4) once mirrored back; shifting right by one compensates.
    Column 0 keeps the unshifted mirrored value.
    """
    if h.shape != h_flipped.shape:
        raise ValueError(f"heatmap shapes differ: {h.shape} vs {h_flipped.shape}")
    back = _shift_right(mirror_heatmaps(h_flipped, pairs))
    return (h + back) * 0.5


def blur(h: np.ndarray, sigma: float = BLUR_SIGMA) -> np.ndarray:
    """Per-channel Gaussian smoothing with replicated borders.

    The kernel spans ``2*ceil(3*sigma)+1`` cells. Each channel is rescaled so
    its maximum equals the pre-blur maximum (when both are positive).
    """
    if sigma <= 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    h = np.asarray(h, dtype=np.float64)
    radius = math.ceil(3 * sigma)
    sig = (0,) * (h.ndim - 2) + (sigma, sigma)
    out = ndimage.gaussian_filter(h, sig, mode="nearest", truncate=radius / sigma)
    before = h.max(axis=(-2, -1), keepdims=True)
    after = out.max(axis=(-2, -1), keepdims=True)
    ok = (before > 0) & (after > 0)
    scale = np.where(ok, before / np.where(ok, after, 1.0), 1.0)
    return out * scale


def render_target(keypoints: np.ndarray, visible: np.ndarray, out_size: Tuple[int, int] = (64, 48),
                  sigma: float = TARGET_SIGMA, stride: float = DEFAULT_STRIDE):
    """Gaussian targets with peak 1 at each keypoint, zero beyond 3*sigma cells.

    Args:
        keypoints: [K, 2] crop-frame pixel coordinates (x, y).
        visible: [K] flags; invisible keypoints get an all-zero channel.

    Returns:
        (heatmaps [K, H, W] float32, mask [K] float32)
    """
    if sigma <= 0:
        raise ValueError(f"target sigma must be positive, got {sigma}")
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    vis = np.asarray(visible, dtype=bool).reshape(-1)
    hh, ww = out_size
    ys = np.arange(hh, dtype=np.float64)[:, None]
    xs = np.arange(ww, dtype=np.float64)[None, :]
    maps = np.zeros((len(kp), hh, ww), np.float32)
    for k, ((x, y), v) in enumerate(zip(kp, vis)):
        if not v or not np.all(np.isfinite((x, y))):
            continue
        d2 = (xs - x / stride) ** 2 + (ys - y / stride) ** 2
        g = np.exp(-d2 / (2 * sigma * sigma))
        g[d2 > (3 * sigma) ** 2] = 0.0
        maps[k] = g
    return maps, vis.astype(np.float32)


@dataclass
class KeypointSet:
    """Decoded keypoints in one coordinate frame."""

    xy: np.ndarray  # [K, 2]
    score: np.ndarray  # [K]
    visible: np.ndarray  # [K] bool

    def __len__(self) -> int:
        return len(self.score)

    def as_rows(self):
        return [[float(x), float(y), float(s)] for (x, y), s in zip(self.xy, self.score)]


def _argmax_refined(hm: np.ndarray) -> Tuple[float, float, float]:
    hh, ww = hm.shape
    if np.all(hm == hm.flat[0]):
        return float(ww // 2), float(hh // 2), float(hm.flat[0])
    idx = int(np.argmax(hm))
    y, x = divmod(idx, ww)
    fx, fy = float(x), float(y)
    if 0 < x < ww - 1:
        fx += 0.25 * float(np.sign(hm[y, x + 1] - hm[y, x - 1]))
    if 0 < y < hh - 1:
        fy += 0.25 * float(np.sign(hm[y + 1, x] - hm[y - 1, x]))
    return fx, fy, float(hm[y, x])


def decode(h: np.ndarray, transform: Optional["CropTransform"] = None,
           stride: float = DEFAULT_STRIDE) -> KeypointSet:
    """Argmax plus quarter-offset decoding of one [K, H, W] heatmap stack.

    Without ``transform`` the result is in crop pixels; with one it is mapped
    back to the original image. Scores are peak values clamped to [0, 1].
    """
    h = np.asarray(h)
    if h.ndim != 3:
        raise ValueError(f"decode expects [K, H, W] heatmaps, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("heatmaps contain non-finite values")
    cells = np.array([_argmax_refined(c) for c in h], dtype=np.float64).reshape(-1, 3)
    xy = cells[:, :2] * stride
    if transform is not None:
        xy = transform.inverse(xy)
    score = np.clip(cells[:, 2], 0.0, 1.0)
    return KeypointSet(xy=xy, score=score, visible=np.ones(len(h), bool))


def _rot(deg: float) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class CropTransform:
    """Similarity map from an image box to a fixed-size crop.

    ``forward(p) = k * R(rotation) @ (p - center) + crop_center`` where the box
    is first padded to the target aspect, ``k = target_w / (box_w * scale)``
    and ``crop_center = ((target_w - 1) / 2, (target_h - 1) / 2)``.
    """

    center: Tuple[float, float]
    box_size: Tuple[float, float]  # padded (w, h)
    rotation: float
    scale: float
    target: Tuple[int, int]  # (h, w)

    @property
    def zoom(self) -> float:
        return self.target[1] / (self.box_size[0] * self.scale)

    @property
    def crop_center(self) -> np.ndarray:
        th, tw = self.target
        return np.array([(tw - 1) / 2.0, (th - 1) / 2.0])

    def forward_matrix(self) -> np.ndarray:
        lin = self.zoom * _rot(self.rotation)
        off = self.crop_center - lin @ np.asarray(self.center)
        return np.hstack([lin, off[:, None]])

    def inverse_matrix(self) -> np.ndarray:
        lin = _rot(-self.rotation) / self.zoom
        off = np.asarray(self.center) - lin @ self.crop_center
        return np.hstack([lin, off[:, None]])

    def forward(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.center) @ (self.zoom * _rot(self.rotation)).T + self.crop_center

    def inverse(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.crop_center) @ (_rot(-self.rotation) / self.zoom).T + np.asarray(self.center)


def pad_to_aspect(w: float, h: float, aspect: float) -> Tuple[float, float]:
    """Grow (never shrink) one side so that h / w == aspect."""
    if h < w * aspect:
        return w, w * aspect
    return h / aspect, h


def box_to_crop(box: Sequence[float], rotation: float = 0.0, scale: float = 1.0,
                target: Tuple[int, int] = (256, 192)) -> CropTransform:
    """Crop transform for an (x, y, w, h) box padded to the target's aspect about its centre.

    Box edges are continuous (pixel i spans [i, i + 1)), keypoints use pixel
    indices, so the centre sits at ``x + (w - 1) / 2``. A box covering the
    whole image then maps onto the whole crop.
    """
    x, y, w, h = (float(v) for v in box)
    if not (w > 0 and h > 0) or not all(math.isfinite(v) for v in (x, y, w, h)):
        raise ValueError(f"degenerate box {tuple(box)}: width and height must be positive and finite")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    th, tw = target
    pw, ph = pad_to_aspect(w, h, th / tw)
    return CropTransform(center=(x + (w - 1) / 2.0, y + (h - 1) / 2.0), box_size=(pw, ph), rotation=float(rotation),
                         scale=float(scale), target=(int(th), int(tw)))


def warp_image(image: np.ndarray, transform: CropTransform, order: int = 1) -> np.ndarray:
    """Resample an [H, W, C] image into the [C, th, tw] crop (zero outside the image)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    a = transform.inverse_matrix()
    # (x, y) matrix -> (row, col) matrix for scipy
    mat = np.array([[a[1, 1], a[1, 0]], [a[0, 1], a[0, 0]]])
    off = np.array([a[1, 2], a[0, 2]])
    th, tw = transform.target
    return np.stack([
        ndimage.affine_transform(img[:, :, c], mat, offset=off, output_shape=(th, tw), order=order,
                                 mode="constant", cval=0.0)
        for c in range(img.shape[2])
    ]).astype(np.float32)
