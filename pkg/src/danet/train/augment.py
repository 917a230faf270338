"""Random rotation, scaling and horizontal flipping of crop-frame samples."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence, Tuple

import numpy as np

from ..codec import COCO_FLIP_PAIRS, CropTransform, flip_permutation, warp_image
from .synth import SynthSample


@dataclass(frozen=True)
class AugmentRanges:
    rotation: float = 45.0  # degrees, sampled uniformly in [-rotation, rotation]
    scale: Tuple[float, float] = (0.7, 1.35)
    flip_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.scale
        if self.rotation < 0 or not 0 < lo <= hi or not 0 <= self.flip_prob <= 1:
            raise ValueError(f"invalid augmentation ranges {self}")


IDENTITY = AugmentRanges(rotation=0.0, scale=(1.0, 1.0), flip_prob=0.0)


def frame_transform(size: Tuple[int, int], rotation: float, scale: float) -> CropTransform:
    """Rotate by ``rotation`` degrees and zoom by ``1 / scale`` about the frame centre."""
    h, w = size
    c = ((w - 1) / 2.0, (h - 1) / 2.0)
    return CropTransform(center=c, box_size=(float(w), float(h)), rotation=rotation, scale=scale,
                         target=(h, w))


def flip_sample(sample: SynthSample, pairs: Sequence[Tuple[int, int]] = COCO_FLIP_PAIRS) -> SynthSample:
    w = sample.image.shape[2]
    perm = flip_permutation(pairs, len(sample.keypoints))
    kp = sample.keypoints[perm].copy()
    kp[:, 0] = (w - 1) - kp[:, 0]
    return replace(sample, image=np.ascontiguousarray(sample.image[:, :, ::-1]), keypoints=kp,
                   visible=sample.visible[perm].copy())


def augment(sample: SynthSample, rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges(),
            pairs: Sequence[Tuple[int, int]] = COCO_FLIP_PAIRS) -> SynthSample:
    """Draw rotation, scale, then flip (in that order) and apply them.

    Keypoints that leave the frame are marked invisible.
    """
    rot = rng.uniform(-ranges.rotation, ranges.rotation)
    scale = rng.uniform(*ranges.scale)
    flip = rng.random() < ranges.flip_prob
    h, w = sample.image.shape[1:]
    out = sample
    if rot != 0.0 or scale != 1.0:
        t = frame_transform((h, w), rot, scale)
        img = warp_image(sample.image.transpose(1, 2, 0), t)
        out = replace(sample, image=img, keypoints=t.forward(sample.keypoints), head_size=sample.head_size / scale)
    if flip:
        out = flip_sample(out, pairs)
    kp = out.keypoints
    inside = (kp[:, 0] >= 0) & (kp[:, 0] <= w - 1) & (kp[:, 1] >= 0) & (kp[:, 1] <= h - 1)
    return replace(out, visible=out.visible & inside)
