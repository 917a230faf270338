"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    excluded: int
    worst_index: Optional[tuple]
    analytic: np.ndarray
    numeric: np.ndarray


def _scalar(t: Tensor) -> float:
    return float(np.asarray(t.data, dtype=np.float64).reshape(-1)[0])


def gradient_check(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-3,
    numeric_dtype=np.float64,
    kink_tol: float = 1e-4,
    indices: Optional[np.ndarray] = None,
) -> GradCheckReport:
    """Compare ``x.grad`` from :func:`backward` against central differences.

    The analytic gradient is computed in ``x``'s own dtype. The numeric one
    re-evaluates ``fn`` with ``x`` promoted to ``numeric_dtype`` and perturbed
    one element at a time.

    Elements sitting on a non-differentiable point (an ``abs`` or ``relu``
    kink, a max-pool tie) are excluded. They are detected two ways: the
    central differences at ``step`` and ``step/2`` disagree, or the one-sided
    differences stay asymmetric as the step shrinks. Smooth functions pass
    both tests to O(step^2).

    ``indices`` optionally restricts the check to a subset of flat indices.
    """
    x.grad = None
    out = fn(x)
    if out.data.size != 1:
        raise ValueError(f"gradient_check needs a scalar-valued fn, got shape {out.shape}")
    backward(out, leaves=[x])
    analytic = np.array(x.grad, dtype=np.float64).reshape(-1)  # copy: later backward calls accumulate in place

    orig = x.data
    work = orig.astype(numeric_dtype).copy()
    flat = work.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    numeric = np.full(flat.size, np.nan)
    excluded = 0
    worst, worst_idx = 0.0, None
    checked = 0
    try:
        x.data = work
        with no_grad():
            f0 = _scalar(fn(x))
            for i in indices:
                v = flat[i]
                vals = {}
                for d in (step, -step, step / 2, -step / 2):
                    flat[i] = v + d
                    vals[d] = _scalar(fn(x))
                flat[i] = v
                c1 = (vals[step] - vals[-step]) / (2 * step)
                c2 = (vals[step / 2] - vals[-step / 2]) / step
                numeric[i] = c1
                scale = max(abs(c1), abs(c2), 1e-8)
                asym1 = abs((vals[step] - f0) - (f0 - vals[-step])) / step
                asym2 = abs((vals[step / 2] - f0) - (f0 - vals[-step / 2])) / (step / 2)
                kink = abs(c1 - c2) > kink_tol * scale or (
                    asym2 > 0.75 * asym1 and asym1 > kink_tol * scale
                )
                if kink:
                    excluded += 1
                    continue
                a = analytic[i]
                err = abs(a - c1) / max(abs(a), abs(c1), 1e-8)
                checked += 1
                if err > worst or worst_idx is None:
                    worst = max(err, worst)
                    worst_idx = np.unravel_index(i, orig.shape)
    finally:
        x.data = orig
    return GradCheckReport(worst, checked, excluded, worst_idx, analytic.reshape(orig.shape),
                           numeric.reshape(orig.shape))


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3, **kwargs) -> float:
    """Max over elements of ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``."""
    return gradient_check(fn, x, step=step, **kwargs).max_rel_error
