"""Session fixtures: the toy training runs shared by acceptance criteria
and the slow codec invariants. Training happens once per session with
pinned seeds, so every consumer sees bit-identical checkpoints."""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from samic import codec
from samic.toydata import make_dataset

TRAIN_SEED = 42
DATA_SEED = 100
EVAL_SEED = 999
TOY_STEPS = 2000
TOY_LR = 1e-3


@dataclass
class ToyRun:
    name: str
    model: codec.CodecModel
    losses: list
    wall_seconds: float

    @property
    def converged_loss(self) -> float:
        return float(np.mean(self.losses[-100:]))


def _train(name: str, images, clusters: int, use_rrm: bool,
           lambda_index: int, steps: int = TOY_STEPS) -> ToyRun:
    cfg = codec.toy_config(clusters=clusters, use_rrm=use_rrm,
                           lambda_index=lambda_index)
    model = codec.CodecModel(cfg, np.random.default_rng(TRAIN_SEED))
    opt = codec.Adam(list(model.named_params()), lr=TOY_LR)
    step_rng = np.random.default_rng(np.random.SeedSequence((TRAIN_SEED, 0xC0DE)))
    losses = []
    start = time.perf_counter()
    for step in range(steps):
        parts = codec.train_step(model, [images[step % len(images)]], opt, step_rng)
        if parts is not None:
            losses.append(parts["loss"])
    wall = time.perf_counter() - start
    assert len(losses) == steps, f"{name}: steps were aborted"
    return ToyRun(name=name, model=model, losses=losses, wall_seconds=wall)


@pytest.fixture(scope="session")
def toy_images():
    return make_dataset(DATA_SEED, 8)


@pytest.fixture(scope="session")
def eval_images():
    return make_dataset(EVAL_SEED, 10)


@pytest.fixture(scope="session")
def toy_runs(toy_images):
    """Four 2000-step toy trainings: the ablation triple plus a high-rate
    penalty run. Takes on the order of half an hour in total."""
    runs = {
        "raster": _train("raster", toy_images, clusters=1, use_rrm=False,
                         lambda_index=0),
        "sass": _train("sass", toy_images, clusters=16, use_rrm=False,
                       lambda_index=0),
        "sass_rrm": _train("sass_rrm", toy_images, clusters=16, use_rrm=True,
                           lambda_index=0),
        "lam3": _train("lam3", toy_images, clusters=16, use_rrm=True,
                       lambda_index=3),
    }
    for run in runs.values():
        print(f"[toy-run] {run.name}: converged {run.converged_loss:.4f} "
              f"in {run.wall_seconds:.0f}s")
    return runs
