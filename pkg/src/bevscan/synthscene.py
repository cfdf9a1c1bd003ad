"""Procedural driving scenes: oriented vehicle boxes, a camera ring, ray-cast
images and simulated LiDAR / radar returns."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .geometry import BevGrid, CameraRig, rasterize_points, surround_rig
from .targets import Targets, make_targets

MODALITIES = ("camera", "camera+radar", "camera+lidar")
SPLIT_SEED_BASE = {"train": 0, "val": 1_000_000, "test": 2_000_000}
EGO_BOX = (0.0, 0.0, 0.0, 5.0, 2.4)  # x, z, yaw, length, width (with margin)
VISIBLE_MIN_PIXELS = 10


@dataclass(frozen=True)
class Vehicle:
    x: float
    z: float
    yaw: float  # heading, clockwise from +Z
    length: float
    width: float
    height: float

    def corners(self) -> np.ndarray:
        """(4, 2) footprint corners in metric (x, z)."""
        return box_corners(self.x, self.z, self.yaw, self.length, self.width)


def box_corners(x, z, yaw, length, width) -> np.ndarray:
    fwd = np.array([np.sin(yaw), np.cos(yaw)])
    lat = np.array([np.cos(yaw), -np.sin(yaw)])
    hl, hw = length / 2, width / 2
    c = np.array([x, z])
    return np.array([c + hl * fwd + hw * lat, c + hl * fwd - hw * lat,
                     c - hl * fwd - hw * lat, c - hl * fwd + hw * lat])


def polygons_overlap(p: np.ndarray, q: np.ndarray) -> bool:
    """Separating-axis test for two convex polygons given as (n, 2) vertices."""
    for poly in (p, q):
        for i in range(len(poly)):
            edge = poly[(i + 1) % len(poly)] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            a, b = p @ axis, q @ axis
            if a.max() <= b.min() or b.max() <= a.min():
                return False
    return True


@dataclass
class SceneSpec:
    seed: int
    vehicles: list[Vehicle]
    rig: CameraRig = field(repr=False)
    colors: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 3)))
    ground_tone: float = 0.5


def generate_scene(seed: int, n_vehicles_range: tuple[int, int] = (6, 16), rig: CameraRig | None = None,
                   extent: float = 50.0, margin: float = 1.0, max_tries: int = 200) -> SceneSpec:
    lo, hi = n_vehicles_range
    if hi < lo or lo < 0:
        raise ValueError(f"empty vehicle count range {n_vehicles_range}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo, hi + 1))
    ego = box_corners(*EGO_BOX)
    vehicles: list[Vehicle] = []
    polys: list[np.ndarray] = []
    lim = extent - margin
    for _ in range(n):
        for _ in range(max_tries):
            length = float(np.clip(rng.normal(4.5, 0.4), 3.6, 5.6))
            width = float(np.clip(rng.normal(2.0, 0.15), 1.6, 2.4))
            height = float(np.clip(rng.normal(1.6, 0.15), 1.3, 2.0))
            x, z = rng.uniform(-lim, lim, 2)
            yaw = float(rng.uniform(0, np.pi))
            poly = box_corners(x, z, yaw, length, width)
            if np.abs(poly).max() >= lim:
                continue
            if polygons_overlap(poly, ego) or any(polygons_overlap(poly, q) for q in polys):
                continue
            vehicles.append(Vehicle(float(x), float(z), yaw, length, width, height))
            polys.append(poly)
            break
    colors = np.array([colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.55, 1.0))
                       for _ in vehicles]).reshape(-1, 3)
    return SceneSpec(seed, vehicles, rig if rig is not None else surround_rig(), colors,
                     float(rng.uniform(0.4, 0.6)))


# ray casting ----------------------------------------------------------

def _box_frames(vehicles: list[Vehicle]):
    if not vehicles:
        return np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3))
    centers = np.array([[v.x, -v.height / 2, v.z] for v in vehicles])
    axes = np.array([[[np.sin(v.yaw), 0, np.cos(v.yaw)], [np.cos(v.yaw), 0, -np.sin(v.yaw)], [0, 1, 0]]
                     for v in vehicles])
    halves = np.array([[v.length / 2, v.width / 2, v.height / 2] for v in vehicles])
    return centers, axes, halves


def cast_rays(origin: np.ndarray, dirs: np.ndarray, vehicles: list[Vehicle]):
    """Nearest hit of each ray against the ground plane and the boxes.

    Returns ``(t, hit_id, face_axis)``: ray parameter (inf for no hit),
    vehicle index (-1 = ground, -2 = nothing) and the box axis (0..2) of the
    entered face.
    """
    n = len(dirs)
    t_best = np.full(n, np.inf)
    hit = np.full(n, -2, dtype=np.int64)
    face = np.full(n, -1, dtype=np.int64)
    down = dirs[:, 1] > 1e-9
    t_ground = np.where(down, -origin[1] / np.where(down, dirs[:, 1], 1.0), np.inf)
    ground = down & (t_ground > 0)
    t_best[ground] = t_ground[ground]
    hit[ground] = -1
    centers, axes, halves = _box_frames(vehicles)
    for k in range(len(vehicles)):
        o_l = axes[k] @ (origin - centers[k])  # (3,)
        d_l = dirs @ axes[k].T  # (n, 3)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-halves[k] - o_l) / d_l
            t2 = (halves[k] - o_l) / d_l
        tnear = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        tfar = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
        parallel_out = (d_l == 0) & (np.abs(o_l) > halves[k])
        t_in = tnear.max(axis=1)
        t_out = tfar.min(axis=1)
        ok = (t_in <= t_out) & (t_in > 1e-6) & ~parallel_out.any(axis=1) & (t_in < t_best)
        t_best[ok] = t_in[ok]
        hit[ok] = k
        face[ok] = tnear[ok].argmax(axis=1)
    return t_best, hit, face


def pixel_rays(rig: CameraRig, k: int, image_size: tuple[int, int]):
    h, w = image_size
    fx, fy, cx, cy = rig.intrinsics[k]
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    cam = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    r = rig.rotations[k]
    dirs = cam @ r  # R^T applied to row vectors
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = -r.T @ rig.translations[k]
    return origin, dirs


def _ground_color(px: np.ndarray, pz: np.ndarray, tone: float) -> np.ndarray:
    checker = ((np.floor(px / 4.0) + np.floor(pz / 4.0)) % 2) * 0.06
    ripple = 0.03 * np.sin(0.7 * px) * np.sin(0.9 * pz)
    g = tone + checker + ripple
    return np.stack([g, g, g * 0.95], axis=-1)


_SKY = np.array([0.62, 0.74, 0.92])
_LIGHT = np.array([0.3, -0.8, 0.5]) / np.linalg.norm([0.3, -0.8, 0.5])


@dataclass
class RenderedSample:
    images: np.ndarray  # (K, 3, H, W) in [0, 1]
    instance_maps: np.ndarray  # (K, H, W) vehicle index, -1 ground, -2 sky
    points: np.ndarray  # (P, 3) LiDAR/radar returns, ego frame
    visible_pixels: np.ndarray  # (K, n_vehicles)

    @property
    def visibility(self) -> np.ndarray:
        if self.visible_pixels.size == 0:
            return np.zeros(self.visible_pixels.shape[1], dtype=bool)
        return (self.visible_pixels > VISIBLE_MIN_PIXELS).any(axis=0)


def render_images(scene: SceneSpec, image_size: tuple[int, int] | None = None, noise: float = 0.01):
    rig = scene.rig
    image_size = image_size or rig.image_size
    h, w = image_size
    rng = np.random.default_rng(scene.seed + 7919)
    nv = len(scene.vehicles)
    images = np.empty((rig.num_cameras, 3, h, w))
    ids = np.empty((rig.num_cameras, h, w), dtype=np.int64)
    counts = np.zeros((rig.num_cameras, nv), dtype=np.int64)
    _, axes, _ = _box_frames(scene.vehicles)
    for k in range(rig.num_cameras):
        origin, dirs = pixel_rays(rig, k, image_size)
        t, hit, face = cast_rays(origin, dirs, scene.vehicles)
        col = np.broadcast_to(_SKY, dirs.shape).copy()
        col *= (1.0 - 0.25 * np.clip(-dirs[:, 1:2], 0, 1))
        gmask = hit == -1
        p = origin + t[gmask, None] * dirs[gmask]
        col[gmask] = _ground_color(p[:, 0], p[:, 2], scene.ground_tone)
        vmask = hit >= 0
        if vmask.any():
            vid, f = hit[vmask], face[vmask]
            normal = axes[vid, f]
            normal *= -np.sign(np.einsum("ij,ij->i", normal, dirs[vmask]))[:, None]
            shade = 0.55 + 0.45 * np.clip(normal @ -_LIGHT * -1.0, 0, 1)
            col[vmask] = scene.colors[vid] * shade[:, None]
            counts[k] = np.bincount(vid, minlength=nv)
        col = np.clip(col + rng.normal(0, noise, col.shape), 0, 1)
        # 8-bit quantisation, as a real sensor (and the PPM export) would store it
        images[k] = (np.round(col * 255) / 255).reshape(h, w, 3).transpose(2, 0, 1)
        ids[k] = hit.reshape(h, w)
    return images, ids, counts


def lidar_points(scene: SceneSpec, n_beams: int = 32, az_step_deg: float = 0.5,
                 elev_range_deg: tuple[float, float] = (-25.0, 5.0), height: float = 1.8,
                 range_noise: float = 0.02, max_range: float = 80.0, rng=None) -> np.ndarray:
    """Dense spinning-LiDAR returns with Gaussian range noise."""
    rng = rng if rng is not None else np.random.default_rng(scene.seed + 104729)
    az = np.radians(np.arange(0.0, 360.0, az_step_deg))
    el = np.radians(np.linspace(elev_range_deg[0], elev_range_deg[1], n_beams))
    azg, elg = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.sin(azg) * np.cos(elg), -np.sin(elg), np.cos(azg) * np.cos(elg)], -1).reshape(-1, 3)
    origin = np.array([0.0, -height, 0.0])
    t, hit, _ = cast_rays(origin, dirs, scene.vehicles)
    ok = np.isfinite(t) & (t < max_range)
    r = t[ok] + rng.normal(0, range_noise, ok.sum())
    return origin + r[:, None] * dirs[ok]


def radar_points(scene: SceneSpec, keep: float = 0.02, range_noise: float = 0.5) -> np.ndarray:
    """Sparse noisy returns: LiDAR rays subsampled, with large range noise."""
    rng = np.random.default_rng(scene.seed + 15485863)
    dense = lidar_points(scene, range_noise=0.0, rng=rng)
    sel = rng.random(len(dense)) < keep
    pts = dense[sel]
    origin = np.array([0.0, -1.8, 0.0])
    d = pts - origin
    r = np.linalg.norm(d, axis=1, keepdims=True)
    return origin + d / r * (r + rng.normal(0, range_noise, r.shape))


def render(scene: SceneSpec, modality: str = "camera+lidar") -> RenderedSample:
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    images, ids, counts = render_images(scene)
    if modality == "camera+lidar":
        pts = lidar_points(scene)
    elif modality == "camera+radar":
        pts = radar_points(scene)
    else:
        pts = np.zeros((0, 3))
    return RenderedSample(images, ids, pts, counts)


@dataclass
class Sample:
    scene: SceneSpec
    rendered: RenderedSample
    targets: Targets
    raster: np.ndarray | None  # (N, nz, nx) or None for camera-only


def make_sample(seed: int, grid: BevGrid, modality: str = "camera", rig: CameraRig | None = None,
                n_vehicles_range: tuple[int, int] = (6, 16)) -> Sample:
    scene = generate_scene(seed, n_vehicles_range, rig)
    rendered = render(scene, modality)
    targets = make_targets(scene.vehicles, grid, rendered.visibility)
    raster = None if modality == "camera" else rasterize_points(rendered.points, grid).data
    return Sample(scene, rendered, targets, raster)


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0, 1) * 255).astype(np.uint8)


def build_bank(split: str, size: int, grid: BevGrid, modalities: Sequence[str] = ("camera",),
               rig: CameraRig | None = None, base_seed: int = 0,
               n_vehicles_range: tuple[int, int] = (6, 16), keep_points: bool = False,
               keep_instance_maps: bool = False) -> dict[str, list[Sample]]:
    """Render a split once and derive every requested modality from the same
    scenes. Images are stored as uint8 (bit-identical to the 8-bit render);
    raw point clouds and per-pixel instance maps are dropped unless asked
    for, since training only needs the rasters."""
    for m in modalities:
        if m not in MODALITIES:
            raise ValueError(f"unknown modality {m!r}; expected one of {MODALITIES}")
    bank: dict[str, list[Sample]] = {m: [] for m in modalities}
    for seed in split_seeds(split, size, base_seed):
        scene = generate_scene(seed, n_vehicles_range, rig)
        images, ids, counts = render_images(scene)
        images = to_uint8(images)
        if not keep_instance_maps:
            ids = np.zeros((0,) + ids.shape[1:], dtype=np.int16)
        targets = None
        for m in modalities:
            pts = {"camera": lambda: np.zeros((0, 3)), "camera+radar": lambda: radar_points(scene),
                   "camera+lidar": lambda: lidar_points(scene)}[m]()
            rendered = RenderedSample(images, ids, pts, counts)
            if targets is None:
                targets = make_targets(scene.vehicles, grid, rendered.visibility).compact()
            raster = None if m == "camera" else rasterize_points(pts, grid).data.astype(np.float32)
            if not keep_points:
                rendered.points = np.zeros((0, 3))
            bank[m].append(Sample(scene, rendered, targets, raster))
    return bank


def split_seeds(split: str, size: int, base_seed: int = 0) -> range:
    if split not in SPLIT_SEED_BASE:
        raise ValueError(f"unknown split {split!r}")
    if size <= 0:
        raise ValueError("dataset size must be positive")
    start = base_seed + SPLIT_SEED_BASE[split]
    return range(start, start + size)


def dataset(split: str, size: int, modality: str, grid: BevGrid, rig: CameraRig | None = None,
            base_seed: int = 0, n_vehicles_range: tuple[int, int] = (6, 16)) -> Iterator[Sample]:
    """Seeded, reproducible samples; splits draw from disjoint seed ranges."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    for seed in split_seeds(split, size, base_seed):
        yield make_sample(seed, grid, modality, rig, n_vehicles_range)


# plain-file export ------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """(3, H, W) float image in [0, 1] -> binary P6."""
    img = (np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def write_pgm(path: str | Path, mask: np.ndarray) -> None:
    """2-D array in [0, 1] -> binary P5."""
    img = (np.clip(np.asarray(mask, float), 0, 1) * 255 + 0.5).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def _read_netpbm(path: str | Path, magic: bytes) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic!r}, got {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(buf, dtype=np.uint8, offset=pos + 1)
    return data, w, h, maxval


def read_pgm(path: str | Path) -> np.ndarray:
    data, w, h, maxval = _read_netpbm(path, b"P5")
    return data[: w * h].reshape(h, w).astype(np.float64) / maxval


def read_ppm(path: str | Path) -> np.ndarray:
    data, w, h, maxval = _read_netpbm(path, b"P6")
    return data[: w * h * 3].reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval
