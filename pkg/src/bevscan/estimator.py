"""scikit-learn style wrapper around model construction, training and scoring."""
from __future__ import annotations

from itertools import cycle
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .metrics import MetricsReport, predict_probability
from .model import BevSegNet
from .synthscene import MODALITIES
from .training import Trainer


def check_samples(samples, cfg: RunConfig) -> list:
    """Validate a sequence of samples against the run configuration."""
    samples = list(samples)
    if not samples:
        raise ValueError("expected at least one sample")
    g = cfg.grid
    want = (cfg.n_cameras, 3, cfg.image_height, cfg.image_width)
    for i, s in enumerate(samples):
        if not hasattr(s, "rendered") or not hasattr(s, "targets"):
            raise TypeError(f"sample {i} is not a synthscene Sample")
        if tuple(np.shape(s.rendered.images)) != want:
            raise ValueError(f"sample {i}: images {np.shape(s.rendered.images)}, expected {want}")
        if s.targets.seg.shape != (1, g.nz, g.nx):
            raise ValueError(f"sample {i}: targets {s.targets.seg.shape} do not match grid {(g.nz, g.nx)}")
        if (cfg.modality == "camera") != (s.raster is None):
            raise ValueError(f"sample {i}: point raster presence does not match modality {cfg.modality!r}")
    return samples


class BevSegEstimator(BaseEstimator):
    """``fit`` trains on Samples, ``predict_proba`` returns (n, nz, nx) vehicle
    probabilities, ``predict`` binary masks, ``score`` the visibility-filtered IoU."""

    def __init__(self, grid_size: int = 96, modality: str = "camera", steps: int = 2000, accumulation: int = 1,
                 lr: float = 5e-4, scan_forward: bool = True, scan_fs: bool = True, scan_bs: bool = True,
                 cioe_pv: bool = True, cioe_bev: bool = True, bev_channels: int = 32, seed: int = 0,
                 threshold: float = 0.5, dtype: str = "float32"):
        self.grid_size = grid_size
        self.modality = modality
        self.steps = steps
        self.accumulation = accumulation
        self.lr = lr
        self.scan_forward = scan_forward
        self.scan_fs = scan_fs
        self.scan_bs = scan_bs
        self.cioe_pv = cioe_pv
        self.cioe_bev = cioe_bev
        self.bev_channels = bev_channels
        self.seed = seed
        self.threshold = threshold
        self.dtype = dtype

    def run_config(self) -> RunConfig:
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        return RunConfig(grid_nx=self.grid_size, grid_nz=self.grid_size, modality=self.modality,
                         steps=self.steps, accumulation=self.accumulation, lr=self.lr,
                         scan_forward=self.scan_forward, scan_fs=self.scan_fs, scan_bs=self.scan_bs,
                         cioe_pv=self.cioe_pv, cioe_bev=self.cioe_bev, bev_channels=self.bev_channels,
                         seed=self.seed, threshold=self.threshold, dtype=self.dtype)

    def fit(self, X: Sequence, y=None, callback=None):
        cfg = self.run_config()
        samples = check_samples(X, cfg)
        self.model_ = BevSegNet(cfg.model_config())
        self.trainer_ = Trainer(self.model_, cfg.train_config())
        self.history_ = self.trainer_.fit(cycle(samples), callback)
        self.grid_ = cfg.grid
        return self

    def predict_proba(self, X: Sequence) -> np.ndarray:
        check_is_fitted(self, "model_")
        samples = check_samples(X, self.run_config())
        return np.stack([predict_probability(self.model_, s) for s in samples])

    def predict(self, X: Sequence) -> np.ndarray:
        return self.predict_proba(X) > self.threshold

    def report(self, X: Sequence) -> MetricsReport:
        check_is_fitted(self, "model_")
        rep = MetricsReport(self.grid_, self.threshold)
        for s, p in zip(X, self.predict_proba(X)):
            rep.add(p, s.targets)
        return rep

    def score(self, X: Sequence, y=None) -> float:
        return self.report(X).iou()
