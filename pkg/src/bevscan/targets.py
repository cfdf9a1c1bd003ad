"""Ground-truth BEV targets: occupancy, centre heatmap and centre offsets."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import BevGrid

CENTER_SIGMA_CELLS = 3.0


@dataclass
class Targets:
    seg: np.ndarray  # (1, nz, nx) in {0, 1}
    centerness: np.ndarray  # (1, nz, nx) in [0, 1]
    offset: np.ndarray  # (2, nz, nx): (row, col) cells from a cell to its centre
    instance_ids: np.ndarray  # (nz, nx), -1 = background
    visibility: np.ndarray  # (n_instances,) bool
    centers: np.ndarray  # (n_instances, 2) continuous (row, col) cell coordinates

    @property
    def n_instances(self) -> int:
        return len(self.visibility)

    @property
    def offset_mask(self) -> np.ndarray:
        return (self.instance_ids >= 0)[None].astype(self.seg.dtype)

    def compact(self) -> "Targets":
        """float32 maps and int16 ids, for holding many samples in memory."""
        return replace(self, seg=self.seg.astype(np.float32), centerness=self.centerness.astype(np.float32),
                       offset=self.offset.astype(np.float32), instance_ids=self.instance_ids.astype(np.int16))

    def keep(self, keep: np.ndarray) -> "Targets":
        """Targets rebuilt from only the instances flagged in ``keep``."""
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != self.visibility.shape:
            raise ValueError(f"{keep.shape[0]} flags for {self.n_instances} instances")
        inside = self.instance_ids >= 0
        kept_cell = np.zeros_like(inside)
        kept_cell[inside] = keep[self.instance_ids[inside]]
        remap = np.full(self.n_instances, -1)
        remap[keep] = np.arange(keep.sum())
        ids = np.where(kept_cell, remap[np.maximum(self.instance_ids, 0)], -1)
        centerness = gaussian_heatmap(self.centers[keep], ids.shape)
        return replace(self, seg=kept_cell[None].astype(self.seg.dtype), centerness=centerness[None],
                       offset=self.offset * kept_cell[None], instance_ids=ids,
                       visibility=self.visibility[keep], centers=self.centers[keep])


def footprint_mask(vehicle, grid: BevGrid) -> np.ndarray:
    """(nz, nx) cells whose centre lies inside the vehicle's oriented footprint."""
    xs, zs = grid.x_centers()[None, :], grid.z_centers()[:, None]
    rx, rz = xs - vehicle.x, zs - vehicle.z
    s, c = np.sin(vehicle.yaw), np.cos(vehicle.yaw)
    along = rx * s + rz * c
    across = rx * c - rz * s
    return (np.abs(along) <= vehicle.length / 2) & (np.abs(across) <= vehicle.width / 2)


def gaussian_heatmap(centers: np.ndarray, shape: tuple[int, int], sigma: float = CENTER_SIGMA_CELLS) -> np.ndarray:
    """Max over instances of an isotropic Gaussian around each centre cell
    (the integer cell containing the continuous centre)."""
    heat = np.zeros(shape)
    rows, cols = np.arange(shape[0])[:, None], np.arange(shape[1])[None, :]
    for r, c in np.floor(np.asarray(centers).reshape(-1, 2) + 0.5).astype(np.int64):
        g = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma ** 2))
        np.maximum(heat, g, out=heat)
    return heat


def make_targets(scene, grid: BevGrid, visibility: np.ndarray | None = None) -> Targets:
    """Rasterise vehicle boxes into targets. ``scene`` is a SceneSpec or a
    plain list of vehicles; ``visibility`` defaults to all-visible."""
    vehicles = list(getattr(scene, "vehicles", scene))
    n = len(vehicles)
    vis = np.ones(n, dtype=bool) if visibility is None else np.asarray(visibility, dtype=bool)
    if vis.shape != (n,):
        raise ValueError(f"{vis.shape} visibility flags for {n} vehicles")
    ids = np.full((grid.nz, grid.nx), -1, dtype=np.int64)
    centers = np.zeros((n, 2))
    for k, v in enumerate(vehicles):
        ids[footprint_mask(v, grid) & (ids < 0)] = k
        # continuous cell coordinates; integer value = the cell's centre
        centers[k] = ((v.z - grid.z_range[0]) / grid.dz - 0.5, (v.x - grid.x_range[0]) / grid.dx - 0.5)
    inside = ids >= 0
    offset = np.zeros((2, grid.nz, grid.nx))
    if n:
        rows, cols = np.nonzero(inside)
        k = ids[rows, cols]
        offset[0, rows, cols] = centers[k, 0] - rows
        offset[1, rows, cols] = centers[k, 1] - cols
    return Targets(inside[None].astype(np.float64), gaussian_heatmap(centers, ids.shape)[None], offset,
                   ids, vis, centers)
