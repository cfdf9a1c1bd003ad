"""BEV grid geometry, camera-to-voxel lifting, and point-cloud rasterisation.

Frames: the ego frame is right-handed with +X right, +Y down and +Z forward
(the same convention as a pinhole camera), so the ground plane is ``y = 0``
and heights above ground are negative ``y``. BEV tensors are laid out
``(channels, nz, nx)``: rows follow Z, columns follow X.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, ops
from .tensor.core import ShapeError


@dataclass(frozen=True)
class BevGrid:
    """Metric <-> cell contract for the BEV volume."""

    nx: int = 200
    nz: int = 200
    ny: int = 8
    x_range: tuple[float, float] = (-50.0, 50.0)
    z_range: tuple[float, float] = (-50.0, 50.0)
    y_range: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        if min(self.nx, self.nz, self.ny) < 1:
            raise ValueError(f"grid extents must be positive, got {(self.nx, self.nz, self.ny)}")
        for lo, hi in (self.x_range, self.z_range, self.y_range):
            if not hi > lo:
                raise ValueError(f"empty metric range ({lo}, {hi})")

    @property
    def dx(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.nx

    @property
    def dz(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.nz

    @property
    def dy(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.ny

    def x_centers(self) -> np.ndarray:
        return self.x_range[0] + (np.arange(self.nx) + 0.5) * self.dx

    def z_centers(self) -> np.ndarray:
        return self.z_range[0] + (np.arange(self.nz) + 0.5) * self.dz

    def y_centers(self) -> np.ndarray:
        return self.y_range[0] + (np.arange(self.ny) + 0.5) * self.dy

    def cell_center(self, i, j):
        """Metric (x, z) of cell column ``i`` and row ``j``."""
        return (self.x_range[0] + (np.asarray(i) + 0.5) * self.dx,
                self.z_range[0] + (np.asarray(j) + 0.5) * self.dz)

    def metric_to_cell(self, x, z):
        """Cell (i, j) containing metric (x, z); may fall outside the grid."""
        i = np.floor((np.asarray(x) - self.x_range[0]) / self.dx).astype(np.int64)
        j = np.floor((np.asarray(z) - self.z_range[0]) / self.dz).astype(np.int64)
        return i, j

    def contains(self, x, z) -> np.ndarray:
        x, z = np.asarray(x), np.asarray(z)
        return ((x >= self.x_range[0]) & (x < self.x_range[1])
                & (z >= self.z_range[0]) & (z < self.z_range[1]))

    def cell_distance(self) -> np.ndarray:
        """(nz, nx) Euclidean distance of every cell centre from the ego origin."""
        xs, zs = self.x_centers(), self.z_centers()
        return np.hypot(xs[None, :], zs[:, None])

    def voxel_centers(self) -> np.ndarray:
        """(ny*nz*nx, 3) metric centres, flattened in (y, z, x) order."""
        ys, zs, xs = np.meshgrid(self.y_centers(), self.z_centers(), self.x_centers(), indexing="ij")
        return np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)


@dataclass
class CameraRig:
    """K pinhole cameras.

    ``intrinsics[k] = (fx, fy, cx, cy)`` in pixel units of the feature map the
    rig is used with; ``rotations[k]``/``translations[k]`` map ego points into
    camera ``k``: ``p_cam = R p_ego + t``.
    """

    intrinsics: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    image_size: tuple[int, int] = (64, 112)  # (h, w) the intrinsics refer to

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(-1, 4)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        k = len(self.intrinsics)
        if len(self.rotations) != k or len(self.translations) != k:
            raise ValueError("intrinsics, rotations and translations disagree on camera count")
        for r in self.rotations:
            if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
                raise ValueError("camera rotation is not a proper orthonormal matrix")

    @property
    def num_cameras(self) -> int:
        return len(self.intrinsics)

    def scaled(self, factor: float) -> "CameraRig":
        """Intrinsics for a feature map downsampled by ``factor`` (pixel centres at integers)."""
        fx, fy, cx, cy = self.intrinsics.T
        intr = np.stack([fx / factor, fy / factor, (cx + 0.5) / factor - 0.5, (cy + 0.5) / factor - 0.5], axis=1)
        h, w = self.image_size
        return CameraRig(intr, self.rotations.copy(), self.translations.copy(),
                         (int(round(h / factor)), int(round(w / factor))))

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "CameraRig":
        """The same cameras expressed in a new ego frame ``p' = Q p + s``."""
        q, s = np.asarray(rotation, float), np.asarray(translation, float)
        rots = self.rotations @ q.T
        trans = self.translations - np.einsum("kij,j->ki", rots, s)
        return CameraRig(self.intrinsics.copy(), rots, trans, self.image_size)

    def project(self, points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel (u, v) and depth of ego-frame ``points`` (n, 3) in camera ``k``."""
        pc = points @ self.rotations[k].T + self.translations[k]
        fx, fy, cx, cy = self.intrinsics[k]
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = fx * pc[:, 0] / z + cx
            v = fy * pc[:, 1] / z + cy
        return u, v, z


def surround_rig(n_cameras: int = 6, image_size: tuple[int, int] = (64, 112), hfov_deg: float = 70.0,
                 height: float = 1.6, pitch_deg: float = 5.0) -> CameraRig:
    """Ring of cameras at equal azimuth spacing, camera 0 facing +Z, indices running clockwise."""
    h, w = image_size
    f = (w / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
    intr, rots, trans = [], [], []
    p = np.radians(pitch_deg)
    centre = np.array([0.0, -height, 0.0])
    for k in range(n_cameras):
        yaw = 2 * np.pi * k / n_cameras
        fwd = np.array([np.sin(yaw) * np.cos(p), np.sin(p), np.cos(yaw) * np.cos(p)])
        right = np.array([np.cos(yaw), 0.0, -np.sin(yaw)])
        down = np.cross(fwd, right)
        ego_from_cam = np.stack([right, down, fwd], axis=1)
        r = ego_from_cam.T
        intr.append((f, f, (w - 1) / 2.0, (h - 1) / 2.0))
        rots.append(r)
        trans.append(-r @ centre)
    return CameraRig(np.array(intr), np.array(rots), np.array(trans), image_size)


def lift_matrix(rig: CameraRig, grid: BevGrid, feat_hw: tuple[int, int],
                grid_pose: tuple[np.ndarray, np.ndarray] | None = None) -> sp.csr_matrix:
    """Sparse (ny*nz*nx, K*h*w) operator that bilinearly samples and camera-averages.

    ``rig`` intrinsics must already refer to the ``feat_hw`` resolution.
    ``grid_pose = (Q, s)`` places the grid in the ego frame (``p = Q g + s``).
    """
    h, w = feat_hw
    if np.any(rig.intrinsics[:, :2] == 0):
        raise ValueError("degenerate intrinsics: focal length is zero")
    pts = grid.voxel_centers()
    if grid_pose is not None:
        q, s = grid_pose
        pts = pts @ np.asarray(q, float).T + np.asarray(s, float)
    n_vox = len(pts)
    rows, cols, vals = [], [], []
    count = np.zeros(n_vox)
    per_cam = []
    for k in range(rig.num_cameras):
        u, v, z = rig.project(pts, k)
        ok = (z > 1e-6) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        count += ok
        per_cam.append((k, np.nonzero(ok)[0], u[ok], v[ok]))
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)
    for k, idx, u, v in per_cam:
        u0 = np.clip(np.floor(u), 0, max(w - 2, 0)).astype(np.int64)
        v0 = np.clip(np.floor(v), 0, max(h - 2, 0)).astype(np.int64)
        u1 = np.minimum(u0 + 1, w - 1)
        v1 = np.minimum(v0 + 1, h - 1)
        fu, fv = u - u0, v - v0
        base = k * h * w
        for vv, uu, wt in ((v0, u0, (1 - fu) * (1 - fv)), (v0, u1, fu * (1 - fv)),
                           (v1, u0, (1 - fu) * fv), (v1, u1, fu * fv)):
            rows.append(idx)
            cols.append(base + vv * w + uu)
            vals.append(wt * inv[idx])
    if rows:
        rows_a, cols_a, vals_a = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        rows_a = cols_a = np.zeros(0, np.int64)
        vals_a = np.zeros(0)
    mat = sp.coo_matrix((vals_a, (rows_a, cols_a)), shape=(n_vox, rig.num_cameras * h * w))
    return mat.tocsr()


class Lifter:
    """Caches the lift operator for a fixed rig, grid and feature resolution."""

    def __init__(self, rig: CameraRig, grid: BevGrid, feat_hw: tuple[int, int],
                 grid_pose: tuple[np.ndarray, np.ndarray] | None = None, dtype=np.float64):
        self.rig, self.grid, self.feat_hw = rig, grid, tuple(feat_hw)
        self.matrix = lift_matrix(rig, grid, feat_hw, grid_pose).astype(dtype)
        self.matrix_t = self.matrix.T.tocsr()

    def valid_mask(self) -> np.ndarray:
        """(ny, nz, nx) voxels seen by at least one camera."""
        g = self.grid
        return (np.diff(self.matrix.indptr) > 0).reshape(g.ny, g.nz, g.nx)

    def __call__(self, features: Tensor) -> Tensor:
        return lift(features, self)


def lift(features: Tensor, lifter: Lifter) -> Tensor:
    """(K, d, h, w) camera features -> (d, ny, nz, nx) voxel features."""
    k, d, h, w = features.shape
    if (h, w) != lifter.feat_hw or k != lifter.rig.num_cameras:
        raise ShapeError(f"features {features.shape} do not match lifter (K={lifter.rig.num_cameras}, hw={lifter.feat_hw})")
    flat = ops.reshape(ops.transpose(features, (0, 2, 3, 1)), (k * h * w, d))
    vox = ops.sparse_matmul(lifter.matrix, flat, lifter.matrix_t)
    g = lifter.grid
    return ops.transpose(ops.reshape(vox, (g.ny, g.nz, g.nx, d)), (3, 0, 1, 2))


def collapse_y(vox: Tensor) -> Tensor:
    """(d, ny, nz, nx) -> (d*ny, nz, nx); channel ``f*ny + y`` holds feature ``f`` at level ``y``."""
    if vox.ndim != 4:
        raise ShapeError(f"expected (d, ny, nz, nx), got {vox.shape}")
    d, ny, nz, nx = vox.shape
    return ops.reshape(vox, (d * ny, nz, nx))


@dataclass
class PointCloudRaster:
    """Grid-aligned point raster: channel 0 = point count, channel 1 = mean y."""

    data: np.ndarray = field(repr=False)

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def rasterize_points(points, grid: BevGrid) -> PointCloudRaster:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((2, grid.nz, grid.nx))
    if len(pts) == 0:
        return PointCloudRaster(out)
    keep = grid.contains(pts[:, 0], pts[:, 2])
    pts = pts[keep]
    i, j = grid.metric_to_cell(pts[:, 0], pts[:, 2])
    flat = j * grid.nx + i
    counts = np.bincount(flat, minlength=grid.nz * grid.nx).astype(np.float64)
    ysum = np.bincount(flat, weights=pts[:, 1], minlength=grid.nz * grid.nx)
    out[0] = counts.reshape(grid.nz, grid.nx)
    out[1] = np.where(counts > 0, ysum / np.maximum(counts, 1), 0.0).reshape(grid.nz, grid.nx)
    return PointCloudRaster(out)


def fuse(bev: Tensor, raster: Tensor | PointCloudRaster | None) -> Tensor:
    """Concatenate camera BEV channels (first) with raster channels."""
    if raster is None:
        return bev
    if isinstance(raster, PointCloudRaster):
        raster = Tensor(raster.data.astype(bev.dtype))
    if raster.shape[0] == 0:
        return bev
    if raster.shape[-2:] != bev.shape[-2:]:
        raise ShapeError(f"spatial mismatch between BEV {bev.shape} and raster {raster.shape}")
    return ops.concat([bev, raster], axis=0)


def read_xyz(path) -> np.ndarray:
    """Plain-text point cloud, one ``x y z`` triple per line (metres)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # an empty file is a valid empty cloud
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if arr.size == 0:
        return np.zeros((0, 3))
    if arr.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, got {arr.shape[1]}")
    return arr


def write_xyz(path, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.4f")
