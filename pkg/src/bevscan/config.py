"""Plain-text ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .blocks import OsaStageConfig
from .geometry import BevGrid
from .model import ModelConfig
from .synthscene import MODALITIES
from .training import TrainConfig

SEED_ENV = "BEVSCAN_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # grid
    grid_nx: int = 96
    grid_nz: int = 96
    grid_ny: int = 8
    extent: float = 50.0
    # sensors / data
    image_height: int = 64
    image_width: int = 112
    n_cameras: int = 6
    camera_height: float = 1.6
    camera_pitch_deg: float = 5.0
    modality: str = "camera"
    train_size: int = 0  # 0 = steps * accumulation * batch_size
    val_size: int = 200
    vehicles_min: int = 6
    vehicles_max: int = 16
    # model
    bev_channels: int = 32
    pv_channels: int = 16
    ebc_inner: int = 32
    ebc_state: int = 8
    head_channels: int = 16
    scan_forward: bool = True
    scan_fs: bool = True
    scan_bs: bool = True
    cioe_pv: bool = True
    cioe_bev: bool = True
    dtype: str = "float32"
    # optimisation
    lr: float = 5e-4
    weight_decay: float = 0.01
    steps: int = 2000
    accumulation: int = 5
    batch_size: int = 1
    loss_weighting: str = "uncertainty"
    pos_weight: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 10
    # evaluation / bookkeeping
    threshold: float = 0.5
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.grid_nx % 8 or self.grid_nz % 8:
            raise ConfigError("grid_nx and grid_nz must be multiples of 8 (three stride-2 decoder levels)")
        if self.batch_size < 1 or self.accumulation < 1 or self.steps < 1:
            raise ConfigError("steps, accumulation and batch_size must be positive")
        if not 0 <= self.vehicles_min <= self.vehicles_max:
            raise ConfigError("need 0 <= vehicles_min <= vehicles_max")

    # derived objects ----------------------------------------------------
    @property
    def grid(self) -> BevGrid:
        e = self.extent
        return BevGrid(self.grid_nx, self.grid_nz, self.grid_ny, (-e, e), (-e, e))

    @property
    def branches(self) -> tuple[str, ...]:
        flags = (("forward", self.scan_forward), ("forward_surround", self.scan_fs),
                 ("backward_surround", self.scan_bs))
        return tuple(name for name, on in flags if on)

    @property
    def samples_per_step(self) -> int:
        return self.accumulation * self.batch_size

    @property
    def n_train(self) -> int:
        return self.train_size or self.steps * self.samples_per_step

    def model_config(self) -> ModelConfig:
        return ModelConfig(grid=self.grid, image_size=(self.image_height, self.image_width),
                           n_cameras=self.n_cameras, camera_height=self.camera_height,
                           camera_pitch_deg=self.camera_pitch_deg, encoder=OsaStageConfig(),
                           pv_channels=self.pv_channels, bev_channels=self.bev_channels,
                           raster_channels=0 if self.modality == "camera" else 2,
                           ebc_inner=self.ebc_inner, ebc_state=self.ebc_state, branches=self.branches,
                           head_channels=self.head_channels, cioe_bev=self.cioe_bev, cioe_pv=self.cioe_pv,
                           seed=self.seed, dtype=self.dtype)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, weight_decay=self.weight_decay,
                           accumulation=self.accumulation, batch_size=self.batch_size,
                           loss_weighting=self.loss_weighting, pos_weight=self.pos_weight,
                           log_every=self.log_every, checkpoint_every=self.checkpoint_every)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # serialisation --------------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dumps())


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(raw: str, kind: type, key: str, lineno: int):
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    types = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        values[key] = _convert(raw, types[key], key, lineno)
    return RunConfig(**values)


def load_config(path: str | Path, env: dict | None = None) -> RunConfig:
    """Read a config file; the ``BEVSCAN_SEED`` environment variable, when set,
    overrides the file's seed."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    cfg = parse_config(p.read_text(), str(p))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            cfg = cfg.replace(seed=int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return cfg
