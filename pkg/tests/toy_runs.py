"""Shared desk-scale training runs for the end-to-end acceptance gates.

Every run trains from scratch on the same synthetic bank and is evaluated on
the same held-out split, so runs differ only in model variant and init seed.
Results are memoised for the session. Setting BEVSCAN_TOY_CACHE to a
directory additionally keeps the bank, reports and checkpoints on disk, which
is meant for iterating on the tests, not for a reference run.
"""
from __future__ import annotations

import functools
import json
import os
import pickle
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

from bevscan.geometry import BevGrid
from bevscan.metrics import MetricsReport, evaluate
from bevscan.model import BevSegNet, ModelConfig
from bevscan.synthscene import build_bank
from bevscan.training import TrainConfig, Trainer

GRID = BevGrid(96, 96)
TRAIN_SCENES = 2000
VAL_SCENES = 200
STEPS = 2000
SEEDS = (0, 1, 2)
MODALITIES = ("camera", "camera+radar", "camera+lidar")

# variant -> (bank modality, ModelConfig overrides)
VARIANTS = {
    "camera": ("camera", {}),
    "camera+radar": ("camera+radar", {"raster_channels": 2}),
    "camera+lidar": ("camera+lidar", {"raster_channels": 2}),
    "no_surround": ("camera", {"branches": ("forward",)}),
    "no_cioe": ("camera", {"cioe_bev": False, "cioe_pv": False}),
}


# picked from single-seed camera-only pilot runs (lr 5e-4 .. 5e-3, pos_weight 1 .. 4)
LR = 5e-3
POS_WEIGHT = 4.0


def train_config() -> TrainConfig:
    return TrainConfig(steps=STEPS, lr=LR, accumulation=1, batch_size=1, pos_weight=POS_WEIGHT, log_every=100,
                       checkpoint_every=0)


def model_config(variant: str, seed: int) -> ModelConfig:
    return ModelConfig(grid=GRID, seed=seed, **VARIANTS[variant][1])


@dataclass
class RunResult:
    variant: str
    seed: int
    report: MetricsReport
    checkpoint: Path
    seconds: float

    @property
    def iou(self) -> float:
        return self.report.iou()


def _cache_dir() -> Path | None:
    d = os.environ.get("BEVSCAN_TOY_CACHE")
    return Path(d) if d else None


@functools.cache
def _work_dir() -> Path:
    return _cache_dir() or Path(tempfile.mkdtemp(prefix="bevscan-toy-"))


@functools.cache
def bank() -> tuple[dict, dict]:
    path = _cache_dir() / f"bank_{GRID.nx}_{TRAIN_SCENES}.pkl" if _cache_dir() else None
    if path is not None and path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    train = build_bank("train", TRAIN_SCENES, GRID, MODALITIES)
    val = build_bank("val", VAL_SCENES, GRID, MODALITIES)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            pickle.dump((train, val), fh, protocol=5)
    return train, val


def _report_from(counts: dict, n_scenes: int) -> MetricsReport:
    return MetricsReport(GRID, counts={k: list(v) for k, v in counts.items()}, n_scenes=n_scenes)


@functools.cache
def run(variant: str, seed: int) -> RunResult:
    out = _work_dir() / f"{variant}_seed{seed}"
    summary = out / "report.json"
    if _cache_dir() and summary.exists():
        info = json.loads(summary.read_text())
        return RunResult(variant, seed, _report_from(info["counts"], info["n_scenes"]), out / "final.ckpt",
                         info["seconds"])
    modality = VARIANTS[variant][0]
    train, val = bank()
    model = BevSegNet(model_config(variant, seed))
    t0 = time.perf_counter()
    Trainer(model, train_config(), out).fit(train[modality])
    seconds = time.perf_counter() - t0
    report = evaluate(model, val[modality], GRID)
    summary.write_text(json.dumps({"counts": report.counts, "n_scenes": report.n_scenes, "seconds": seconds}))
    return RunResult(variant, seed, report, out / "final.ckpt", seconds)


def mean_iou(variant: str, key: str = "overall") -> float:
    return sum(run(variant, s).report.iou(key) for s in SEEDS) / len(SEEDS)
