"""The single-pyramid network: stem, four OAB stages, bottom-up fusion, regressor."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .autograd import functional as F
from .autograd.functional import ShapeError
from .autograd.tensor import Tensor
from .blocks import OABStage, SecondOrderFusion, Transition
from .config import DANetConfig
from .nn import BatchNorm2d, BnReluConv, Conv2d, Module


class Stem(Module):
    """7x7/2 then 3x3/2 convolutions, each followed by BN and ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(3, channels, 7, rng, stride=2, padding=3)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng, stride=2, padding=1)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class DANet(Module):
    """Top-down OAB pyramid with a bottom-up fusion path.

    Bottom-up path: ``U4 = top(L4)``; for i = 3, 2, 1,
    ``Ui = fuse_i(Li, project_i(upsample2x(U{i+1})))`` where ``Li`` is the
    lateral tap of transition i. The regressor reads ``U1`` at 1/4 input
    resolution.
    """

    def __init__(self, config: DANetConfig, rng: np.random.Generator):
        self.config = config
        cfg = config
        self.stem = Stem(cfg.stem_channels, rng)
        self.stages: List[OABStage] = []
        self.transitions: List[Transition] = []
        c = cfg.stem_channels
        for s in cfg.stages:
            stage = OABStage(c, s.layers, s.growth, s.bottleneck, cfg.variant, rng, cfg.cau_reduction)
            trans = Transition(stage.out_channels, s.transition, s.pool, rng)
            self.stages.append(stage)
            self.transitions.append(trans)
            c = s.transition
        widths = cfg.lateral_widths()
        self.top = BnReluConv(widths[3], widths[3], 1, rng)
        # index i serves pyramid level i (0-based); level 3 has no projection/fusion
        self.projections = [BnReluConv(widths[i + 1], widths[i], 1, rng) for i in range(3)]
        self.fusions = [SecondOrderFusion(widths[i], cfg.variant.fusion, rng, cfg.sfu_reduction)
                        for i in range(3)]
        self.head = BnReluConv(widths[0], cfg.keypoints, 1, rng, bias=True)

        self.stem._scope_name = "stem"
        for i in range(4):
            self.stages[i]._scope_name = f"stage{i + 1}"
            self.transitions[i]._scope_name = f"transition{i + 1}"
        self.top._scope_name = "bottom_up"
        for i in range(3):
            self.projections[i]._scope_name = "bottom_up"
            self.fusions[i]._scope_name = f"fusion{i + 1}"
        self.head._scope_name = "head"

    def check_input(self, images: Tensor) -> None:
        if images.ndim != 4:
            raise ShapeError(f"expected images shaped [N,3,H,W], got {images.shape}")
        if images.shape[1] != 3:
            raise ShapeError(f"expected 3 input channels, got {images.shape[1]}")
        h, w = images.shape[2:]
        if h % 4 or w % 4:
            raise ShapeError(f"input size {h}x{w} is not divisible by 4")

    def laterals(self, images: Tensor) -> List[Tensor]:
        """Top-down path: the four lateral taps, finest first."""
        self.check_input(images)
        x = self.stem(images)
        taps = []
        for stage, trans in zip(self.stages, self.transitions):
            lateral, x = trans(stage(x))
            taps.append(lateral)
        return taps

    def fuse(self, taps: List[Tensor]) -> Tensor:
        u = self.top(taps[3])
        for i in (2, 1, 0):
            lat = taps[i]
            up = F.crop_spatial(F.upsample2x(u), lat.shape[2], lat.shape[3])
            u = self.fusions[i](lat, self.projections[i](up))
        return u

    def forward(self, images: Tensor) -> Tensor:
        return self.head(self.fuse(self.laterals(images)))


def build_model(config: DANetConfig, seed: int = 0) -> DANet:
    """Deterministically initialise a model: same config and seed, same weights."""
    return DANet(config, np.random.default_rng(seed))


def parameter_groups(model: DANet) -> List[Tuple[str, str]]:
    """(parameter name, top-level group) pairs used by the cost report."""
    out = []
    for name, _ in model.named_parameters():
        head, _, rest = name.partition(".")
        if head in ("stages", "transitions", "fusions"):
            idx = int(rest.split(".", 1)[0])
            group = {"stages": "stage", "transitions": "transition", "fusions": "fusion"}[head] + str(idx + 1)
        elif head in ("top", "projections"):
            group = "bottom_up"
        else:
            group = head
        out.append((name, group))
    return out
