"""Gradient checks of the building blocks, shared by the self-test and the test suite."""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .autograd import functional as F
from .autograd.gradcheck import GradCheckReport, gradient_check
from .autograd.tensor import Tensor
from .blocks import BlockVariantConfig, ChannelAttentionUnit, MaskAttentionUnit, OABLayer, SecondOrderFusion
from .config import DANetConfig, preset
from .model import build_model
from .nn import Module

GRAD_TOL_F32 = 1e-3
GRAD_TOL_F64 = 1e-6
# central-difference step (numeric side in 64-bit): balances truncation,
# O(step^2), against roundoff, O(eps |f| / step), and rarely straddles a kink
CHECK_STEP = 1e-5


def randomize_parameters(module: Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Overwrite every parameter (zero-initialised ones included) with random values.

    BN scales are drawn near 1 and running statistics are perturbed as well.
    """
    for name, p in module.named_parameters():
        noise = rng.standard_normal(p.shape) * scale
        if _is_bn(name) and name.endswith(".weight"):
            noise = 1.0 + 0.2 * noise
        p.data = noise.astype(p.dtype)
    for name, b in module.named_buffers():
        if name.endswith("running_mean"):
            b.data[...] = rng.standard_normal(b.shape) * 0.1
        elif name.endswith("running_var"):
            b.data[...] = rng.uniform(0.5, 1.5, b.shape)


def _is_bn(name: str) -> bool:
    parent = name.rsplit(".", 2)[-2]
    return parent.startswith("bn")


def cast_module(module: Module, dtype) -> None:
    """Cast every parameter and buffer in place (used for 64-bit checks)."""
    for _, t in module.named_tensors():
        t.data = t.data.astype(dtype)


def _check(forward: Callable[[], Tensor], targets: Dict[str, Tensor], rng: np.random.Generator,
           max_elements: Optional[int] = None) -> Dict[str, GradCheckReport]:
    """Check ``sum(forward() * R)`` for a fixed random R against each target tensor."""
    out = forward()
    r = rng.standard_normal(out.shape)
    reports = {}
    for name, t in targets.items():
        idx = None
        if max_elements is not None and t.size > max_elements:
            idx = np.sort(rng.choice(t.size, max_elements, replace=False))
        reports[name] = gradient_check(lambda _t: F.sum(F.mul(forward(), r.astype(out.dtype))), t,
                                       step=CHECK_STEP, indices=idx)
    return reports


Built = Tuple[Callable[[], Tensor], Dict[str, Tensor], Dict[str, Tensor]]


def _setup(module: Module, rng: np.random.Generator, dtype, scale: float = 0.5) -> None:
    randomize_parameters(module, rng, scale)
    cast_module(module, dtype)


def _input(rng, shape, dtype) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=True)


def build_mau(rng, dtype, channels: int = 8, growth: int = 4) -> Built:
    mau = MaskAttentionUnit(channels, growth, rng)
    _setup(mau, rng, dtype)
    x = _input(rng, (1, channels, 4, 4), dtype)
    return (lambda: mau(x)), {"input": x}, {"depthwise.weight": mau.depthwise.weight,
                                            "pointwise.conv.weight": mau.pointwise.conv.weight}


def build_cau(rng, dtype, channels: int = 8) -> Built:
    cau = ChannelAttentionUnit(channels, rng, reduction=4)
    _setup(cau, rng, dtype)
    x = _input(rng, (1, channels, 4, 4), dtype)
    return (lambda: F.mul(x, cau(x))), {"input": x}, {"fc1.weight": cau.fc1.weight,
                                                      "fc2.weight": cau.fc2.weight}


def build_oab_layer(rng, dtype, channels: int = 8, growth: int = 4, bottleneck: int = 4,
                    variant: BlockVariantConfig = BlockVariantConfig()) -> Built:
    layer = OABLayer(channels, growth, bottleneck, variant, rng, cau_reduction=4)
    _setup(layer, rng, dtype)
    x = _input(rng, (1, channels, 4, 4), dtype)
    return (lambda: layer(x)), {"input": x}, {"conv.conv.weight": layer.conv.conv.weight,
                                              "bottleneck.conv.weight": layer.bottleneck.conv.weight}


def build_sfu(rng, dtype, channels: int = 8) -> Built:
    sfu = SecondOrderFusion(channels, "sfu", rng, reduction=2)
    _setup(sfu, rng, dtype)
    a = _input(rng, (1, channels, 4, 4), dtype)
    b = _input(rng, (1, channels, 4, 4), dtype)
    return (lambda: sfu(a, b)), {"f_td": a, "f_bu": b}, {"expand.weight": sfu.expand.weight,
                                                         "spatial.conv.weight": sfu.spatial.conv.weight}


def tiny_gradcheck_config() -> DANetConfig:
    """Growth 8, one layer per stage, 32x24 input."""
    return replace(preset("tiny"), input_size=(32, 24))


def build_tiny_model(rng, dtype) -> Built:
    """Whole network on a 1x3x32x24 input, BN on (randomised) running statistics.

    The network keeps its own fan-in initialisation; only the zero-initialised
    weights are made nonzero so every attention branch carries gradient.
    Fully random weights inflate the gradient's dynamic range to ~1e5, where
    32-bit backprop cannot resolve the small elements. Batch statistics are
    avoided: the deepest levels are 2x2 and 1x1, where normalising over a
    handful of values is too ill-conditioned for finite differences.
    Train-mode BN is covered by the block checks.
    """
    cfg = tiny_gradcheck_config()
    model = build_model(cfg, int(rng.integers(2 ** 31)))
    for _, p in model.named_parameters():
        if p.data.ndim > 1 and not np.any(p.data):
            p.data = (rng.standard_normal(p.shape) * 0.1).astype(p.dtype)
    for name, b in model.named_buffers():
        if name.endswith("running_mean"):
            b.data[...] = rng.standard_normal(b.shape) * 0.1
        elif name.endswith("running_var"):
            b.data[...] = rng.uniform(0.5, 1.5, b.shape)
    cast_module(model, dtype)
    model.eval()
    x = _input(rng, (1, 3) + tuple(cfg.input_size), dtype)
    params = {
        "stem.conv1.weight": model.stem.conv1.weight,
        "stages.0.layers.0.mau.depthwise.weight": model.stages[0].layers[0].mau.depthwise.weight,
        "stages.1.layers.0.cau.fc1.weight": model.stages[1].layers[0].cau.fc1.weight,
        "fusions.0.reduce.conv.weight": model.fusions[0].reduce.conv.weight,
        "head.conv.weight": model.head.conv.weight,
    }
    return (lambda: model(x)), {"images": x}, params


BUILDERS: Dict[str, Callable[..., Built]] = {
    "mau": build_mau,
    "cau": build_cau,
    "oab_layer": build_oab_layer,
    "sfu": build_sfu,
    "tiny_model": build_tiny_model,
}
# sampled elements per tensor for the end-to-end check
TINY_MODEL_SAMPLES = 96


def run_check(block: str, seed: int, dtype=np.float32, params: Optional[bool] = None) -> Dict[str, GradCheckReport]:
    """Gradient check of one block.

    Inputs are always checked. Parameters are checked by default only in
    64-bit: a parameter gradient is a sum over every spatial position, and in
    32-bit an element that cancels to ~1e-5 of the largest one carries
    rounding error well above 1e-3 of itself.
    """
    rng = np.random.default_rng(seed)
    forward, inputs, weights = BUILDERS[block](rng, dtype)
    if params is None:
        params = np.dtype(dtype) == np.float64
    targets = {**inputs, **(weights if params else {})}
    limit = TINY_MODEL_SAMPLES if block == "tiny_model" else None
    return _check(forward, targets, rng, max_elements=limit)


def worst_error(reports: Dict[str, GradCheckReport]) -> Tuple[float, str]:
    name = max(reports, key=lambda k: reports[k].max_rel_error)
    return reports[name].max_rel_error, name


def run_block_checks(seeds: List[int], dtype=np.float32) -> Dict[str, List[Tuple[int, float, str]]]:
    """``{block: [(seed, worst error, worst tensor), ...]}``."""
    return {block: [(s, *worst_error(run_check(block, s, dtype))) for s in seeds] for block in BUILDERS}
