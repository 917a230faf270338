"""Deterministic synthetic stick figures with exact COCO-17 joint positions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from ..codec import COCO_KEYPOINTS

NUM_KEYPOINTS = len(COCO_KEYPOINTS)
K = {name: i for i, name in enumerate(COCO_KEYPOINTS)}

# (joint a, joint b, RGB); the subject's left side is warm, the right side cool
LIMBS = (
    ("left_shoulder", "left_elbow", (1.0, 0.15, 0.1)),
    ("left_elbow", "left_wrist", (1.0, 0.6, 0.1)),
    ("right_shoulder", "right_elbow", (0.1, 0.3, 1.0)),
    ("right_elbow", "right_wrist", (0.1, 0.9, 1.0)),
    ("left_hip", "left_knee", (0.9, 0.1, 0.6)),
    ("left_knee", "left_ankle", (1.0, 1.0, 0.2)),
    ("right_hip", "right_knee", (0.2, 0.9, 0.2)),
    ("right_knee", "right_ankle", (0.5, 0.2, 0.9)),
    ("left_shoulder", "right_shoulder", (0.85, 0.85, 0.85)),
    ("left_hip", "right_hip", (0.6, 0.6, 0.6)),
    ("left_shoulder", "left_hip", (0.95, 0.5, 0.5)),
    ("right_shoulder", "right_hip", (0.5, 0.5, 0.95)),
)
FACE_DOTS = {
    "nose": (1.0, 1.0, 1.0),
    "left_eye": (1.0, 0.0, 0.0),
    "right_eye": (0.0, 0.0, 1.0),
    "left_ear": (1.0, 0.5, 0.0),
    "right_ear": (0.0, 0.8, 0.8),
}
HEAD_COLOR = (0.55, 0.4, 0.3)


@dataclass
class SynthSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    keypoints: np.ndarray  # [17, 2] crop pixels (x, y)
    visible: np.ndarray  # [17] bool
    head_size: float  # PCKh-style normaliser: 0.6 x diagonal of the head's bounding square


def _segment_coverage(xs, ys, a, b, half_width: float) -> np.ndarray:
    """Anti-aliased coverage of a thick segment: 1 inside, linear ramp over one pixel."""
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    ll = dx * dx + dy * dy
    t = np.zeros_like(xs) if ll == 0 else np.clip(((xs - ax) * dx + (ys - ay) * dy) / ll, 0.0, 1.0)
    d = np.hypot(xs - (ax + t * dx), ys - (ay + t * dy))
    return np.clip(half_width + 0.5 - d, 0.0, 1.0)


def _paint(img: np.ndarray, alpha: np.ndarray, color) -> None:
    col = np.asarray(color, np.float64)[:, None, None]
    img *= 1.0 - alpha
    img += alpha * col


def _pose(rng: np.random.Generator, size: Tuple[int, int]):
    h, w = size
    hb = rng.uniform(0.6, 0.8) * h
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    top = (h - hb) / 2 + rng.uniform(-0.03, 0.03) * h
    p = np.zeros((NUM_KEYPOINTS, 2))
    neck = np.array([cx, top + 0.17 * hb])
    r = 0.065 * hb
    head = neck + (rng.uniform(-0.02, 0.02) * hb, -0.085 * hb)
    p[K["nose"]] = head + (rng.uniform(-0.3, 0.3) * r, 0.25 * r)
    # the subject's left appears on the image right (facing the camera)
    p[K["left_eye"]] = head + (0.4 * r, -0.15 * r)
    p[K["right_eye"]] = head + (-0.4 * r, -0.15 * r)
    p[K["left_ear"]] = head + (0.95 * r, 0.05 * r)
    p[K["right_ear"]] = head + (-0.95 * r, 0.05 * r)
    shoulder_w = rng.uniform(0.10, 0.13) * hb
    p[K["left_shoulder"]] = neck + (shoulder_w, 0.02 * hb)
    p[K["right_shoulder"]] = neck + (-shoulder_w, 0.02 * hb)
    pelvis = neck + (rng.uniform(-0.03, 0.03) * hb, 0.33 * hb)
    hip_w = rng.uniform(0.06, 0.09) * hb
    p[K["left_hip"]] = pelvis + (hip_w, 0)
    p[K["right_hip"]] = pelvis + (-hip_w, 0)

    def chain(start, side, l1, l2, spread1, spread2):
        # angles from straight down, positive = outward
        a1 = rng.uniform(*spread1)
        a2 = a1 + rng.uniform(*spread2)
        j1 = start + l1 * np.array([side * math.sin(a1), math.cos(a1)])
        j2 = j1 + l2 * np.array([side * math.sin(a2), math.cos(a2)])
        return j1, j2

    for name, side in (("left", 1), ("right", -1)):
        p[K[f"{name}_elbow"]], p[K[f"{name}_wrist"]] = chain(
            p[K[f"{name}_shoulder"]], side, 0.16 * hb, 0.15 * hb, (-0.3, 1.6), (-1.2, 1.2))
        p[K[f"{name}_knee"]], p[K[f"{name}_ankle"]] = chain(
            p[K[f"{name}_hip"]], side, 0.22 * hb, 0.21 * hb, (-0.2, 0.5), (-0.5, 0.3))
    return p, head, r, hb


def render_figure(rng: np.random.Generator, size: Tuple[int, int] = (256, 192)) -> SynthSample:
    h, w = size
    kp, head, r, hb = _pose(rng, size)
    coarse = rng.uniform(0.0, 1.0, (3, max(2, h // 16), max(2, w // 16)))
    base = ndimage.zoom(coarse, (1, h / coarse.shape[1], w / coarse.shape[2]), order=1)[:, :h, :w]
    img = 0.15 + 0.35 * base + rng.normal(0.0, 0.04, (3, h, w))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    half = max(0.9, 0.018 * hb)
    for a, b, color in LIMBS:
        _paint(img, _segment_coverage(xs, ys, kp[K[a]], kp[K[b]], half), color)
    _paint(img, _segment_coverage(xs, ys, head, head, r), HEAD_COLOR)
    dot = max(0.8, 0.2 * r)
    for name, color in FACE_DOTS.items():
        _paint(img, _segment_coverage(xs, ys, kp[K[name]], kp[K[name]], dot), color)
    inside = (kp[:, 0] >= 0) & (kp[:, 0] <= w - 1) & (kp[:, 1] >= 0) & (kp[:, 1] <= h - 1)
    return SynthSample(image=np.clip(img, 0, 1).astype(np.float32), keypoints=kp, visible=inside,
                       head_size=float(0.6 * 2 * r * math.sqrt(2)))


def synth_dataset(n: int, seed: int = 0, size: Tuple[int, int] = (256, 192)) -> List[SynthSample]:
    """``n`` figures; sample i depends only on (seed, i)."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    return [render_figure(np.random.default_rng([seed, i]), size) for i in range(n)]
