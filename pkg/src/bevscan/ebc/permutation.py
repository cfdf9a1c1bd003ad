"""Patch serialisation orders for the BEV scan branches."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..geometry import BevGrid

BAND_EDGES = (20.0, 35.0)
BAND_NAMES = ("A", "B", "C")


class ScanKind(str, Enum):
    FORWARD = "forward"
    FORWARD_SURROUND = "forward_surround"
    BACKWARD_SURROUND = "backward_surround"


@dataclass(frozen=True)
class PatchPermutation:
    order: np.ndarray  # order[k] = raster index of the k-th scanned patch
    kind: ScanKind

    def __len__(self) -> int:
        return len(self.order)

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(len(self.order))
        return inv


def patch_centers(grid: BevGrid, patch: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Metric (x, z) centres of the patches, flattened in raster (row = z) order."""
    if grid.nx % patch or grid.nz % patch:
        raise ValueError(f"grid {grid.nz}x{grid.nx} is not divisible into {patch}x{patch} patches")
    px, pz = grid.nx // patch, grid.nz // patch
    xs = grid.x_range[0] + (np.arange(px) * patch + patch / 2) * grid.dx
    zs = grid.z_range[0] + (np.arange(pz) * patch + patch / 2) * grid.dz
    return np.tile(xs, pz), np.repeat(zs, px)


def band_index(distance: np.ndarray) -> np.ndarray:
    """0 for [0, 20) m, 1 for [20, 35) m, 2 for 35 m and beyond."""
    return np.searchsorted(np.asarray(BAND_EDGES), np.asarray(distance), side="right")


def band_partition(grid: BevGrid, patch: int = 2) -> np.ndarray:
    x, z = patch_centers(grid, patch)
    return band_index(np.hypot(x, z))


def build_permutation(grid: BevGrid, kind: ScanKind | str, patch: int = 2) -> PatchPermutation:
    """Forward is raster order. Forward-surround visits band A, then B, then C;
    inside a band patches go clockwise (seen from above, +X right) starting at
    the +Z axis, ties broken by radius and then raster index. Backward-surround
    is the exact reversal."""
    kind = ScanKind(kind)
    x, z = patch_centers(grid, patch)
    n = len(x)
    if kind is ScanKind.FORWARD:
        return PatchPermutation(np.arange(n), kind)
    radius = np.hypot(x, z)
    angle = np.round(np.mod(np.arctan2(x, z), 2 * np.pi), 9)
    angle[angle >= np.round(2 * np.pi, 9)] = 0.0
    band = band_index(radius)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(n), np.round(radius, 9), angle, band))
    if kind is ScanKind.BACKWARD_SURROUND:
        order = order[::-1].copy()
    return PatchPermutation(order, kind)
