"""Self-test: gradient checks, channel flow for every preset, codec round trips, weights."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np

from .autograd.tensor import Tensor, no_grad
from .checks import BUILDERS, GRAD_TOL_F32, run_check, worst_error
from .codec import CropTransform, decode, render_target
from .config import PRESETS, DANetConfig, preset
from .model import build_model
from .weights import WeightsError, assign_weights, decode_weights, encode_weights, load_weights

# channel flow is checked on a small input; widths do not depend on resolution
FLOW_INPUT = (32, 32)


@dataclass
class CheckResult:
    module: str
    invariant: str
    ok: bool
    observed: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.module}: {self.invariant} ({self.observed})"


def _guard(module: str, invariant: str, fn: Callable[[], CheckResult]) -> CheckResult:
    try:
        return fn()
    except Exception as exc:  # a crashing check is a failed check
        return CheckResult(module, invariant, False, f"{type(exc).__name__}: {exc}")


def gradient_checks(seed: int) -> List[CheckResult]:
    out = []
    for block in BUILDERS:
        inv = f"{block} gradients match finite differences < {GRAD_TOL_F32:g} (32-bit, seed {seed})"

        def run(block=block, inv=inv):
            err, name = worst_error(run_check(block, seed))
            return CheckResult("tensor-autograd", inv, err < GRAD_TOL_F32, f"max rel error {err:.2e} on {name}")

        out.append(_guard("tensor-autograd", inv, run))
    return out


def channel_flow(cfg: DANetConfig, seed: int) -> CheckResult:
    """Stage outputs carry C0 + D*g channels, laterals the transition widths, the head K maps."""
    model = build_model(cfg, seed).eval()
    h, w = FLOW_INPUT
    problems = []
    with no_grad():
        x = model.stem(Tensor(np.zeros((1, 3, h, w), np.float32)))
        taps = []
        for i, (stage, trans, (c0, pre, post)) in enumerate(zip(model.stages, model.transitions,
                                                                 cfg.stage_widths())):
            y = stage(x)
            want = c0 + cfg.stages[i].layers * cfg.stages[i].growth
            if y.shape[1] != want or pre != want:
                problems.append(f"stage{i + 1} {y.shape[1]} != {want}")
            lateral, x = trans(y)
            if lateral.shape[1] != post:
                problems.append(f"lateral{i + 1} {lateral.shape[1]} != {post}")
            taps.append(lateral)
        out = model.head(model.fuse(taps))
    expect = (1, cfg.keypoints, h // 4, w // 4)
    if out.shape != expect:
        problems.append(f"head {out.shape} != {expect}")
    widths = "/".join(str(p) for _, p, _ in cfg.stage_widths())
    return CheckResult("danet-model", f"channel flow of {cfg.name}", not problems,
                       "; ".join(problems) if problems else f"stage outputs {widths}")


def codec_round_trip(step: float = 0.25) -> CheckResult:
    """Encode a keypoint on a sub-cell grid, decode, compare (heatmap cells)."""
    worst = 0.0
    size = (16, 12)
    for u in np.arange(2.0, 10.0, step):
        for v in np.arange(2.0, 14.0, step):
            maps, _ = render_target(np.array([[u * 4, v * 4]]), np.array([True]), size, 2.0, 4)
            got = decode(maps, stride=1).xy[0]
            worst = max(worst, float(np.hypot(got[0] - u, got[1] - v)))
    return CheckResult("heatmap-codec", f"encode/decode round trip <= 0.5 cell on a {step:g}-cell grid",
                       worst <= 0.5, f"worst {worst:.3f} cell")


def crop_round_trip(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        t = CropTransform(center=tuple(rng.uniform(0, 200, 2)), box_size=(rng.uniform(20, 100),) * 2,
                          rotation=float(rng.uniform(-45, 45)), scale=float(rng.uniform(0.7, 1.35)),
                          target=(256, 192))
        p = rng.uniform(-50, 300, (8, 2))
        worst = max(worst, float(np.abs(t.inverse(t.forward(p)) - p).max()))
    return CheckResult("heatmap-codec", "crop transform inverse(forward(p)) == p", worst < 1e-9,
                       f"max deviation {worst:.1e} px")


def weights_round_trip(seed: int) -> CheckResult:
    cfg = preset("tiny")
    src = build_model(cfg, seed)
    dst = assign_weights(build_model(cfg, seed + 1), decode_weights(encode_weights(src)))
    a, b = dict(src.named_tensors()), dict(dst.named_tensors())
    same = all(np.array_equal(a[n].data, b[n].data) for n in a)
    return CheckResult("weights", "in-memory save/load is bit-exact", same, f"{len(a)} tensors")


def weights_load_check(path: Union[str, Path], cfg: DANetConfig) -> CheckResult:
    inv = f"load {Path(path).name} as {cfg.name}"
    try:
        model = load_weights(path, cfg)
    except (WeightsError, OSError) as exc:
        return CheckResult("weights", inv, False, str(exc))
    finite = all(np.all(np.isfinite(t.data)) for _, t in model.named_tensors())
    return CheckResult("weights", inv, finite, "all tensors finite" if finite else "non-finite values")


def run_selftest(seed: int = 0, weights: Optional[Union[str, Path]] = None,
                 config: Optional[DANetConfig] = None) -> List[CheckResult]:
    results = gradient_checks(seed)
    for name in PRESETS:
        results.append(_guard("danet-model", f"channel flow of {name}",
                              lambda name=name: channel_flow(preset(name), seed)))
    results.append(_guard("heatmap-codec", "encode/decode round trip", codec_round_trip))
    results.append(_guard("heatmap-codec", "crop transform inverse", lambda: crop_round_trip(seed)))
    results.append(_guard("weights", "in-memory save/load", lambda: weights_round_trip(seed)))
    if weights is not None:
        results.append(weights_load_check(weights, config or preset("tiny")))
    return results
