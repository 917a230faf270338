"""Persons-per-second inference benchmark."""

from __future__ import annotations

import copy
import csv
import io
import math
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Tuple

import numpy as np

from .autograd.tensor import Tensor, no_grad
from .model import DANet


class BenchError(RuntimeError):
    """The benchmark could not run (worker start-up or forward failure)."""


@dataclass
class BenchReport:
    threads: int
    batch_size: int
    warmup: int  # warmup batches per worker, excluded from every count
    persons: int
    wall_ns: int
    latencies_ns: List[int] = field(default_factory=list)
    input_size: Tuple[int, int] = (256, 192)
    replicated: bool = False

    @property
    def wall_seconds(self) -> Fraction:
        return Fraction(self.wall_ns, 10 ** 9)

    @property
    def pps(self) -> Fraction:
        """Persons per second, exact: ``pps * wall_seconds == persons``."""
        return Fraction(self.persons) / self.wall_seconds

    def latency_percentile(self, q: float) -> float:
        """Per-batch latency percentile in seconds."""
        return float(np.percentile(np.asarray(self.latencies_ns, np.float64), q)) / 1e9

    def summary(self) -> dict:
        return {
            "threads": self.threads, "batch_size": self.batch_size, "warmup": self.warmup,
            "persons": self.persons, "wall_s": float(self.wall_seconds), "pps": float(self.pps),
            "p50_s": self.latency_percentile(50), "p90_s": self.latency_percentile(90),
            "p99_s": self.latency_percentile(99), "replicated": self.replicated,
        }

    def to_csv(self) -> str:
        row = self.summary()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
        return buf.getvalue()

    def to_text(self) -> str:
        s = self.summary()
        return (f"{s['persons']} persons in {s['wall_s']:.3f} s on {s['threads']} thread(s), "
                f"batch {s['batch_size']}: {s['pps']:.2f} PPS "
                f"(latency p50 {s['p50_s'] * 1e3:.1f} ms, p90 {s['p90_s'] * 1e3:.1f} ms, "
                f"p99 {s['p99_s'] * 1e3:.1f} ms)")


def bench_pps(model: DANet, batch_size: int = 1, threads: int = 1, warmup: int = 2, persons: int = 32,
              input_size: Optional[Tuple[int, int]] = None, replicate: bool = False,
              seed: int = 0) -> BenchReport:
    """Time forward passes over ``ceil(persons / batch_size)`` batches.

    Workers share the eval-mode model (or each get a deep copy with
    ``replicate``), run their warmup batches, then meet at a barrier; the clock
    starts when all are released and stops when the last batch finishes.
    Batches are handed out from a shared counter.
    """
    if batch_size < 1 or threads < 1 or warmup < 0:
        raise ValueError("batch_size and threads must be >= 1 and warmup >= 0")
    if persons < batch_size:
        raise ValueError(f"persons target {persons} is smaller than batch size {batch_size}")
    h, w = input_size or model.config.input_size
    model.eval()
    x = np.random.default_rng(seed).standard_normal((batch_size, 3, h, w)).astype(np.float32)
    n_batches = math.ceil(persons / batch_size)
    lock = threading.Lock()
    state = {"next": 0, "start": 0}
    latencies: List[int] = []
    errors: List[BaseException] = []

    def start_clock():
        state["start"] = time.perf_counter_ns()

    barrier = threading.Barrier(threads, action=start_clock)

    def worker(m: DANet):
        try:
            inp = Tensor(x)
            with no_grad():
                for _ in range(warmup):
                    m(inp)
                barrier.wait()
                while True:
                    with lock:
                        i = state["next"]
                        state["next"] += 1
                    if i >= n_batches:
                        return
                    t0 = time.perf_counter_ns()
                    m(inp)
                    dt = time.perf_counter_ns() - t0
                    with lock:
                        latencies.append(max(dt, 1))
        except threading.BrokenBarrierError:
            pass
        except BaseException as exc:  # reported after join
            errors.append(exc)
            barrier.abort()

    models = [copy.deepcopy(model) if replicate else model for _ in range(threads)]
    pool = [threading.Thread(target=worker, args=(m,), name=f"bench-{i}", daemon=True)
            for i, m in enumerate(models)]
    started = []
    try:
        for t in pool:
            t.start()
            started.append(t)
    except RuntimeError as exc:
        barrier.abort()
        for t in started:
            t.join()
        raise BenchError(f"could not start worker {len(started)} of {threads}: {exc}") from exc
    for t in pool:
        t.join()
    end = time.perf_counter_ns()
    if errors:
        raise BenchError(f"worker failed: {errors[0]!r}") from errors[0]
    return BenchReport(threads=threads, batch_size=batch_size, warmup=warmup, persons=n_batches * batch_size,
                       wall_ns=max(end - state["start"], 1), latencies_ns=latencies, input_size=(h, w),
                       replicated=replicate)
