"""IoU evaluation with distance bands and visibility filtering."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BevGrid
from .targets import Targets

DISTANCE_BANDS = {"0-20m": (0.0, 20.0), "20-35m": (20.0, 35.0), "35-50m": (35.0, 50.0)}


def band_mask(grid: BevGrid, band: tuple[float, float]) -> np.ndarray:
    """Cells whose centre distance d satisfies lo <= d < hi (hi inclusive for
    the outermost 50 m band so the bands cover the full <= 50 m disc)."""
    lo, hi = band
    d = grid.cell_distance()
    upper = d <= hi if hi >= max(b[1] for b in DISTANCE_BANDS.values()) else d < hi
    return (d >= lo) & upper


def binarize(pred_prob, threshold: float = 0.5) -> np.ndarray:
    """Strictly above threshold is foreground; ties go to background."""
    return np.asarray(pred_prob) > threshold


def iou_counts(pred_prob, target, threshold: float = 0.5, region: np.ndarray | None = None) -> tuple[int, int]:
    p = binarize(pred_prob, threshold)
    t = np.asarray(target) > 0.5
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and target {t.shape} differ")
    if region is not None:
        region = np.broadcast_to(region, p.shape)
        p, t = p & region, t & region
    return int(np.count_nonzero(p & t)), int(np.count_nonzero(p | t))


def _ratio(inter: int, union: int) -> float:
    return 1.0 if union == 0 else inter / union


def compute_iou(pred_prob, target, threshold: float = 0.5, band: tuple[float, float] | None = None,
                grid: BevGrid | None = None) -> float:
    """IoU of the binarised prediction against a binary target; 1.0 when both
    are empty in the evaluated region. ``band`` restricts to a distance annulus."""
    region = None
    if band is not None:
        shape = np.shape(target)[-2:]
        grid = grid or BevGrid(nx=shape[1], nz=shape[0])
        region = band_mask(grid, band)
    return _ratio(*iou_counts(pred_prob, target, threshold, region))


def visibility_filter(targets: Targets, flags: np.ndarray | None = None) -> Targets:
    """Drop instances whose flag is false (default: the stored visibility).
    Passing ``flags=None`` on already-filtered targets is a no-op."""
    return targets.keep(targets.visibility if flags is None else flags)


@dataclass
class MetricsReport:
    """Dataset-level IoU: intersections and unions are summed over scenes."""

    grid: BevGrid
    threshold: float = 0.5
    counts: dict = field(default_factory=dict)
    n_scenes: int = 0

    def __post_init__(self):
        self._bands = {name: band_mask(self.grid, b) for name, b in DISTANCE_BANDS.items()}
        for key in self.keys():
            self.counts.setdefault(key, [0, 0])

    @staticmethod
    def keys() -> list[str]:
        return ["overall", "overall_unfiltered"] + [f"band_{n}" for n in DISTANCE_BANDS] + \
               [f"band_{n}_unfiltered" for n in DISTANCE_BANDS]

    def add(self, pred_prob, targets: Targets) -> None:
        pred = np.asarray(pred_prob).reshape(self.grid.nz, self.grid.nx)
        for suffix, t in (("", visibility_filter(targets)), ("_unfiltered", targets)):
            seg = t.seg.reshape(pred.shape)
            self._acc("overall" + suffix, iou_counts(pred, seg, self.threshold))
            for name, region in self._bands.items():
                self._acc(f"band_{name}{suffix}", iou_counts(pred, seg, self.threshold, region))
        self.n_scenes += 1

    def _acc(self, key: str, c: tuple[int, int]) -> None:
        self.counts[key][0] += c[0]
        self.counts[key][1] += c[1]

    def iou(self, key: str = "overall") -> float:
        return _ratio(*self.counts[key])

    @property
    def band_iou(self) -> dict[str, float]:
        return {name: self.iou(f"band_{name}") for name in DISTANCE_BANDS}

    def as_dict(self) -> dict[str, float]:
        out = {key: self.iou(key) for key in self.keys()}
        out["n_scenes"] = self.n_scenes
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "iou", "intersection", "union"])
            for key in self.keys():
                inter, union = self.counts[key]
                w.writerow([key, repr(self.iou(key)), inter, union])
            w.writerow(["n_scenes", self.n_scenes, "", ""])

    @staticmethod
    def read_csv(path: str | Path) -> dict[str, float]:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return {r[0]: float(r[1]) for r in rows}


def predict_probability(model, sample) -> np.ndarray:
    """(nz, nx) vehicle probability for one sample, without recording gradients."""
    from .tensor import no_grad
    with no_grad():
        out = model(sample.rendered.images, sample.raster)
    logits = out.seg_logits.data.astype(np.float64)
    return (1.0 / (1.0 + np.exp(-logits)))[0]


def evaluate(model, samples, grid: BevGrid, threshold: float = 0.5) -> MetricsReport:
    report = MetricsReport(grid, threshold)
    for sample in samples:
        report.add(predict_probability(model, sample), sample.targets)
    return report
