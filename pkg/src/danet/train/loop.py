"""Desk-scale training loop and its loss trace."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..autograd.tensor import Tensor, backward
from ..codec import DEFAULT_STRIDE, TARGET_SIGMA, render_target
from ..imaging import normalize
from ..infer import decode_batch, predict_heatmaps
from ..metrics import pck
from ..model import DANet
from ..fileio import atomic_write_bytes
from .augment import AugmentRanges, augment
from .loss import ohkm_loss
from .optim import Adam, lr_at
from .synth import SynthSample


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, value: float):
        self.iteration = iteration
        super().__init__(f"non-finite loss {value} at iteration {iteration}")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 3e-4
    total_iters: int = 2000
    batch_size: int = 8
    ohkm_k: int = 8
    seed: int = 0
    augment: Optional[AugmentRanges] = field(default_factory=AugmentRanges)
    sigma: float = TARGET_SIGMA

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")
        if self.batch_size < 1 or self.ohkm_k < 1:
            raise ValueError("batch_size and ohkm_k must be >= 1")


@dataclass
class TrainResult:
    model: DANet
    trace: List[Tuple[int, float, float]]  # (iter, lr, loss)
    iterations: int
    history: List[Tuple[int, float]] = field(default_factory=list)  # (iter, check value)


def batch_order(n: int, batch_size: int, seed: int):
    """Endless sample-index batches: a fresh permutation per epoch, drawn from ``seed``."""
    rng = np.random.default_rng([seed, 0])
    buf: List[int] = []
    while True:
        while len(buf) < batch_size:
            buf.extend(rng.permutation(n).tolist())
        yield buf[:batch_size]
        buf = buf[batch_size:]


def make_batch(samples: Sequence[SynthSample], out_size, sigma: float):
    images = np.stack([s.image for s in samples])
    maps, masks = zip(*(render_target(s.keypoints, s.visible, out_size, sigma, DEFAULT_STRIDE) for s in samples))
    return normalize(images), np.stack(maps), np.stack(masks)


def train_loop(model: DANet, data: Sequence[SynthSample], cfg: TrainConfig,
               check: Optional[Callable[[DANet], float]] = None, check_every: int = 100,
               stop_at: Optional[float] = None,
               on_iter: Optional[Callable[[int, float, float], None]] = None) -> TrainResult:
    """forward, OHKM loss, backward, Adam step with the linear-decay schedule.

    Samples are visited in per-epoch permutations from ``cfg.seed``; augmentation
    draws come from an independent stream of the same seed. When ``check`` is
    given it runs every ``check_every`` iterations (and after the last); training
    ends early once its value reaches ``stop_at``.
    """
    if model.config.keypoints < cfg.ohkm_k:
        raise ValueError(f"ohkm_k={cfg.ohkm_k} exceeds {model.config.keypoints} keypoints")
    h, w = data[0].image.shape[1:]
    out_size = (h // DEFAULT_STRIDE, w // DEFAULT_STRIDE)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(model.named_parameters())
    order = batch_order(len(data), cfg.batch_size, cfg.seed)
    trace: List[Tuple[int, float, float]] = []
    history: List[Tuple[int, float]] = []
    it = 0
    model.train()
    for it in range(cfg.total_iters):
        picked = [data[i] for i in next(order)]
        if cfg.augment is not None:
            picked = [augment(s, aug_rng, cfg.augment) for s in picked]
        x, target, mask = make_batch(picked, out_size, cfg.sigma)
        lr = lr_at(it, cfg.base_lr, cfg.total_iters)
        loss = ohkm_loss(model(Tensor(x)), target, mask, cfg.ohkm_k)
        value = float(loss.item())
        if not math.isfinite(value):
            raise NumericalError(it, value)
        model.zero_grad()
        backward(loss)
        opt.step(lr)
        trace.append((it, lr, value))
        if on_iter is not None:
            on_iter(it, lr, value)
        last = it == cfg.total_iters - 1
        if check is not None and ((it + 1) % check_every == 0 or last):
            score = check(model)
            model.train()
            history.append((it + 1, score))
            if stop_at is not None and score >= stop_at:
                break
    model.eval()
    return TrainResult(model=model, trace=trace, iterations=it + 1, history=history)


def pck_on_samples(model: DANet, samples: Sequence[SynthSample], tau: float = 0.5, flip: bool = False) -> float:
    """PCK of decoded predictions, distances normalised by each sample's head size."""
    images = np.stack([s.image for s in samples])
    heat = predict_heatmaps(model, images, flip=flip)
    pred = np.stack([k.xy for k in decode_batch(heat)])
    gt = np.stack([s.keypoints for s in samples])
    vis = np.stack([s.visible for s in samples])
    ok = pck(pred, gt, vis, np.array([s.head_size for s in samples]), tau)
    return float(ok.sum() / vis.sum())


def trace_csv(trace: Sequence[Tuple[int, float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "lr", "loss"])
    for it, lr, loss in trace:
        w.writerow([it, repr(float(lr)), repr(float(loss))])
    return buf.getvalue()


def write_trace_csv(trace: Sequence[Tuple[int, float, float]], path: Union[str, Path]) -> None:
    atomic_write_bytes(path, trace_csv(trace).encode("utf-8"))
