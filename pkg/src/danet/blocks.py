"""Orthogonal attention blocks, transitions and the second-order fusion unit."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import functional as F
from .autograd.functional import ShapeError
from .autograd.tensor import Tensor
from .nn import BnReluConv, Conv2d, DepthwiseConv2d, Linear, Module

MAU_MODES = ("off", "mask", "variant1", "variant2")
CAU_MODES = ("off", "oab", "variant1", "variant2")
FUSION_MODES = ("sum", "sfu")

ATTENTION_KERNEL = 9
# final depthwise filter of the mask generator starts near (not at) zero:
# abs() has zero slope at 0, so exact zeros would never receive gradient
MASK_LOGIT_INIT_SCALE = 1e-2
# |logit| cap: 32-bit sigmoid rounds to exactly 1 above ~16.6, which would
# zero the (1 - M) gate; the slope lost at the cap is below 3e-7
MASK_LOGIT_LIMIT = 15.0


@dataclass(frozen=True)
class BlockVariantConfig:
    mau: str = "mask"
    cau: str = "oab"
    fusion: str = "sfu"

    def __post_init__(self):
        if self.mau not in MAU_MODES:
            raise ValueError(f"unknown mau mode {self.mau!r}; expected one of {MAU_MODES}")
        if self.cau not in CAU_MODES:
            raise ValueError(f"unknown cau mode {self.cau!r}; expected one of {CAU_MODES}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSION_MODES}")


class MaskAttentionUnit(Module):
    """M = sigmoid(min(|dw9x9(pw(f))|, 15)), one mask channel per new feature channel."""

    def __init__(self, cin: int, growth: int, rng: np.random.Generator, kernel: int = ATTENTION_KERNEL):
        self.pointwise = BnReluConv(cin, growth, 1, rng)
        self.depthwise = DepthwiseConv2d(growth, kernel, rng, bias=True, init_scale=MASK_LOGIT_INIT_SCALE)
        self.in_channels = cin
        self.out_channels = growth

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"mask attention: expected {self.in_channels} channels, got {x.shape[1]}")
        return F.sigmoid(F.minimum(F.abs(self.depthwise(self.pointwise(x))), MASK_LOGIT_LIMIT))


class ChannelAttentionUnit(Module):
    """Squeeze-excite gate: sigmoid(fc2(relu(fc1(gap(f))))) shaped [N, C, 1, 1]."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 16):
        hidden = max(1, math.ceil(channels / reduction))
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        self.channels = channels

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        if c != self.channels:
            raise ShapeError(f"channel attention: expected {self.channels} channels, got {c}")
        s = F.reshape(F.global_avg_pool(x), (n, c))
        s = F.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return F.reshape(s, (n, c, 1, 1))


class OABLayer(Module):
    """One dense layer: f_next = Cat(f, phi(f * C) * (1 - M))."""

    def __init__(self, cin: int, growth: int, bottleneck: int, variant: BlockVariantConfig,
                 rng: np.random.Generator, cau_reduction: int = 16, mau_kernel: int = ATTENTION_KERNEL):
        self.variant = variant
        self.in_channels = cin
        self.growth = growth
        if variant.cau == "oab":
            self.cau = ChannelAttentionUnit(cin, rng, cau_reduction)
        elif variant.cau == "variant1":
            self.cau = ChannelAttentionUnit(bottleneck, rng, cau_reduction)
        elif variant.cau == "variant2":
            self.cau = ChannelAttentionUnit(growth, rng, cau_reduction)
        self.bottleneck = BnReluConv(cin, bottleneck, 1, rng)
        self.conv = BnReluConv(bottleneck, growth, 3, rng)
        if variant.mau != "off":
            self.mau = MaskAttentionUnit(cin, growth, rng, mau_kernel)

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.growth

    def new_features(self, x: Tensor) -> Tensor:
        """The layer's contribution f_n before concatenation."""
        cau = self.variant.cau
        h = F.mul(x, self.cau(x)) if cau == "oab" else x
        h = self.bottleneck(h)
        if cau == "variant1":
            h = F.mul(h, self.cau(h))
        h = self.conv(h)
        if cau == "variant2":
            h = F.mul(h, self.cau(h))
        mode = self.variant.mau
        if mode != "off":
            m = self.mau(x)
            if mode == "mask":
                h = F.mul(h, F.sub(1.0, m))
            elif mode == "variant1":
                h = F.mul(h, m)
            else:
                h = F.mul(h, F.add(1.0, m))
        return h

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"OAB layer: expected {self.in_channels} input channels, got {x.shape[1]}")
        return F.concat_channels(x, self.new_features(x))


class OABStage(Module):
    """D densely connected OAB layers; layer d reads C0 + d*growth channels."""

    def __init__(self, in_channels: int, num_layers: int, growth: int, bottleneck: int,
                 variant: BlockVariantConfig, rng: np.random.Generator, cau_reduction: int = 16):
        self.in_channels = in_channels
        self.growth = growth
        self.layers = [
            OABLayer(in_channels + d * growth, growth, bottleneck, variant, rng, cau_reduction)
            for d in range(num_layers)
        ]

    @property
    def out_channels(self) -> int:
        return self.in_channels + len(self.layers) * self.growth

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"OAB stage: expected {self.in_channels} input channels, got {x.shape[1]}")
        for layer in self.layers:
            x = layer(x)
        return x


class Transition(Module):
    """BN-ReLU-conv1x1 to the stage width, then optional 3x3/2 max pooling.

    Returns ``(lateral, output)``: the lateral tap is the conv output before pooling.
    """

    def __init__(self, cin: int, cout: int, pool: bool, rng: np.random.Generator):
        self.unit = BnReluConv(cin, cout, 1, rng)
        self.pool = pool
        self.out_channels = cout

    def forward(self, x: Tensor):
        lateral = self.unit(x)
        return lateral, (F.max_pool3x3s2(lateral) if self.pool else lateral)


class SecondOrderFusion(Module):
    """Fuse top-down and bottom-up maps: lam * f_td + (1 - lam) * f_bu.

    ``lam = sigmoid(theta(Cat(f_td, f_bu)))`` where theta is pointwise
    (2C -> C/r), 9x9 depthwise, pointwise (C/r -> C). In ``sum`` mode the two
    maps are simply added.
    """

    def __init__(self, channels: int, mode: str, rng: np.random.Generator, reduction: int = 4,
                 kernel: int = ATTENTION_KERNEL):
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.channels = channels
        if mode == "sfu":
            mid = max(1, channels // reduction)
            self.reduce = BnReluConv(2 * channels, mid, 1, rng)
            self.spatial = BnReluConv(mid, mid, kernel, rng, depthwise=True)
            self.expand = Conv2d(mid, channels, 1, rng, bias=True, zero_init=True)

    def weights(self, f_td: Tensor, f_bu: Tensor) -> Tensor:
        return F.sigmoid(self.expand(self.spatial(self.reduce(F.concat_channels(f_td, f_bu)))))

    def forward(self, f_td: Tensor, f_bu: Tensor) -> Tensor:
        if f_td.shape != f_bu.shape:
            raise ShapeError(f"fusion: input shapes differ ({f_td.shape} vs {f_bu.shape})")
        if f_td.shape[1] != self.channels:
            raise ShapeError(f"fusion: expected {self.channels} channels, got {f_td.shape[1]}")
        if self.mode == "sum":
            return F.add(f_td, f_bu)
        return F.lerp(f_td, f_bu, self.weights(f_td, f_bu))
