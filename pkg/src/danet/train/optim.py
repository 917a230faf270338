"""Adam and the linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from ..nn import Parameter


class NonFiniteGradientError(FloatingPointError):
    """A gradient holds NaN or Inf; the step was not applied."""


def lr_at(iteration: int, base_lr: float, total_iters: int) -> float:
    """``base_lr * (1 - iteration / total_iters)``."""
    if total_iters < 1:
        raise ValueError(f"total_iters must be >= 1, got {total_iters}")
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    return base_lr * (1.0 - iteration / total_iters)


@dataclass
class AdamState:
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place; ``None`` gradients count as zero.

    Every gradient is checked before any parameter moves.
    """
    bad = [n for n, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        g = grads[bad[0]]
        raise NonFiniteGradientError(
            f"non-finite gradient in {len(bad)} tensor(s), first {bad[0]!r}: "
            f"{int(np.sum(~np.isfinite(g)))} of {g.size} elements")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    """Stateful wrapper over :func:`adam_step` for named parameters."""

    def __init__(self, named_params: Iterable[Tuple[str, Parameter]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: List[Tuple[str, Parameter]] = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self, lr: float) -> None:
        adam_step({n: p.data for n, p in self.params}, {n: p.grad for n, p in self.params}, self.state,
                  lr, self.beta1, self.beta2, self.eps)
