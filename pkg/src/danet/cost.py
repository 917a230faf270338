"""Parameter and FLOP accounting per top-level module."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .autograd import functional as F
from .autograd.tensor import DEFAULT_DTYPE, Tensor, no_grad
from .config import preset
from .model import DANet, build_model, parameter_groups

CONVENTIONS = ("mac", "2mac")
# Chosen by calibrate_convention(): danet72 @256x192 lands nearer 1.0 G counting
# one multiply-accumulate as one FLOP. tests/test_cost.py re-derives it.
FLOPS_CONVENTION = "mac"
REFERENCE_GFLOPS = {"danet72": 1.0}


@dataclass
class CostReport:
    params: Dict[str, int] = field(default_factory=dict)
    flops: Dict[str, int] = field(default_factory=dict)
    flops_convention: str = FLOPS_CONVENTION
    input_size: Optional[Tuple[int, int]] = None

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def modules(self):
        """Module names in first-seen order across both tables."""
        return list(dict.fromkeys([*self.params, *self.flops]))

    def rows(self):
        """(module, params, flops) rows followed by a ``total`` row."""
        out = [(m, self.params.get(m, 0), self.flops.get(m, 0)) for m in self.modules()]
        out.append(("total", self.total_params, self.total_flops))
        return out


def count_params(model: DANet) -> CostReport:
    """Learnable scalars per top-level module; BN running statistics are not counted."""
    sizes = dict((n, p.data.size) for n, p in model.named_parameters())
    report = CostReport()
    for name, group in parameter_groups(model):
        report.params[group] = report.params.get(group, 0) + int(sizes[name])
    return report


def _trace(model: DANet, input_size: Tuple[int, int]) -> F.OpTrace:
    h, w = input_size
    x = Tensor(np.zeros((1, 3, h, w), DEFAULT_DTYPE))
    was_training = model.training
    model.eval()
    try:
        with no_grad(), F.trace_ops() as tr:
            model(x)
    finally:
        model.train(was_training)
    return tr


def count_flops(model: DANet, input_size: Optional[Tuple[int, int]] = None,
                convention: str = FLOPS_CONVENTION) -> CostReport:
    """FLOPs of one single-image forward pass, grouped by top-level module.

    Convolutions and FC layers contribute their MACs (times 2 under ``2mac``);
    BN, activations, products, sums and pooling contribute one op per element.
    The report also carries the parameter counts.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown FLOPs convention {convention!r}; expected one of {CONVENTIONS}")
    size = tuple(input_size or model.config.input_size)
    tr = _trace(model, size)
    factor = 2 if convention == "2mac" else 1
    report = count_params(model)
    report.flops_convention = convention
    report.input_size = size
    for key in dict.fromkeys([*tr.macs, *tr.elementwise]):
        name = "bottom_up" if key == type(model).__name__ else key
        report.flops[name] = report.flops.get(name, 0) + factor * tr.macs.get(key, 0) + tr.elementwise.get(key, 0)
    return report


def calibrate_convention(reference: Dict[str, float] = REFERENCE_GFLOPS) -> str:
    """Pick the convention whose totals land nearest the reference GFLOPs (log distance)."""
    best, best_err = None, None
    models = {}
    for conv in CONVENTIONS:
        err = 0.0
        for name, gflops in reference.items():
            if name not in models:
                models[name] = build_model(preset(name))
            got = count_flops(models[name], convention=conv).total_flops / 1e9
            err += abs(np.log(got / gflops))
        if best_err is None or err < best_err:
            best, best_err = conv, err
    return best
