"""Shared fixtures: one toy training run reused by the train, cli and acceptance tests."""

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import pytest

from danet.cli import main
from danet.config import preset
from danet.model import DANet
from danet.train import SynthSample, synth_dataset
from danet.weights import load_weights

TOY_SEED = 0
TOY_SAMPLES = 16
TOY_MAX_ITERS = 2000
TOY_TARGET_PCK = 0.95


@dataclass
class ToyRun:
    out: Path
    model: DANet
    data: List[SynthSample]
    trace: List[Tuple[int, float, float]]
    log: str

    @property
    def weights(self) -> Path:
        return self.out / "weights.danw"


def make_toy_run(out: Path) -> ToyRun:
    """Overfit the tiny preset on the synthetic samples through the CLI, writing into ``out``."""
    log = io.StringIO()
    code = main(["train-toy", "--preset", "tiny", "--seed", str(TOY_SEED), "--samples", str(TOY_SAMPLES),
                 "--iters", str(TOY_MAX_ITERS), "--stop-pck", str(TOY_TARGET_PCK), "--out", str(out)], out=log)
    assert code == 0, log.getvalue()
    cfg = preset("tiny")
    with open(out / "loss.csv", newline="") as fh:
        trace = [(int(r["iter"]), float(r["lr"]), float(r["loss"])) for r in csv.DictReader(fh)]
    return ToyRun(out=out, model=load_weights(out / "weights.danw", cfg),
                  data=synth_dataset(TOY_SAMPLES, seed=TOY_SEED, size=tuple(cfg.input_size)), trace=trace,
                  log=log.getvalue())


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> ToyRun:
    return make_toy_run(tmp_path_factory.mktemp("toy"))
