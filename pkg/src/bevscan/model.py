"""End-to-end network: multi-view images (+ optional point raster) -> BEV heads."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import (BevDecoder, CenterMask, CenterQueryAttention, FeatureNeck, HeadOutputs, ImageEncoder,
                     OsaStageConfig, PredictionHeads, apply_mask)
from .ebc import EBCBlock
from .geometry import BevGrid, CameraRig, Lifter, PointCloudRaster, collapse_y, fuse, lift, surround_rig
from .tensor import ConvNormAct, Module, Tensor, ops

ALL_BRANCHES = ("forward", "forward_surround", "backward_surround")


@dataclass(frozen=True)
class ModelConfig:
    grid: BevGrid = field(default_factory=BevGrid)
    image_size: tuple[int, int] = (64, 112)
    n_cameras: int = 6
    camera_height: float = 1.6
    camera_pitch_deg: float = 5.0
    camera_hfov_deg: float = 70.0
    encoder: OsaStageConfig = field(default_factory=OsaStageConfig)
    pv_channels: int = 16
    bev_channels: int = 32
    raster_channels: int = 0
    ebc_inner: int = 32
    ebc_state: int = 8
    branches: tuple[str, ...] = ALL_BRANCHES
    decoder_widths: tuple[int, int, int, int] = (16, 32, 32, 32)
    head_channels: int = 16
    cioe_bev: bool = True
    cioe_pv: bool = True
    pos_dim: int = 7
    key_dim: int = 16
    seed: int = 0
    dtype: str = "float32"

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def rig(self) -> CameraRig:
        return surround_rig(self.n_cameras, self.image_size, self.camera_hfov_deg,
                            self.camera_height, self.camera_pitch_deg)


IMAGE_MEAN, IMAGE_STD = 0.5, 0.25


def normalize_images(images: np.ndarray) -> np.ndarray:
    """[0, 1] RGB (or uint8) -> roughly zero-mean, unit-scale network input."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images / 255.0
    return (images - IMAGE_MEAN) / IMAGE_STD


def preprocess_raster(raster: np.ndarray) -> np.ndarray:
    """log1p on the count channel; remaining channels pass through."""
    out = np.array(raster, copy=True)
    if out.shape[0]:
        out[0] = np.log1p(out[0])
    return out


class _Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.backbone = ImageEncoder(cfg.encoder, rng, dtype=dtype)
        self.neck = FeatureNeck(cfg.encoder.stage_channels, cfg.pv_channels, rng, dtype=dtype)

    def forward(self, images: Tensor):
        feats = self.backbone(images)
        return self.neck(feats), feats


class _Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.trunk = BevDecoder(cfg.bev_channels, cfg.decoder_widths, rng, dtype=dtype)
        self.conv_block = ConvNormAct(cfg.decoder_widths[0], cfg.head_channels, 3, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv_block(self.trunk(x))


class _Cioe(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        g = cfg.grid
        self.mask = CenterMask(rng, dtype=dtype) if cfg.cioe_bev else None
        self.attn = (CenterQueryAttention(g.nz * g.nx, 1, cfg.pos_dim, cfg.encoder.stage_channels[-1],
                                          cfg.head_channels, cfg.key_dim, rng, dtype=dtype)
                     if cfg.cioe_pv else None)


class BevSegNet(Module):
    """Images -> encoder -> lift -> Y collapse -> fusion -> EBC -> decoder ->
    centre-informed enhancement -> segmentation / centerness / offset heads."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        g = cfg.grid
        self.enc = _Encoder(cfg, rng, dtype)
        stride = 4
        feat_hw = (cfg.image_size[0] // stride, cfg.image_size[1] // stride)
        self.lifter = Lifter(cfg.rig().scaled(stride), g, feat_hw, dtype=dtype)
        self.fuse = ConvNormAct(cfg.pv_channels * g.ny + cfg.raster_channels, cfg.bev_channels, 1, rng, dtype=dtype)
        self.ebc = EBCBlock(g, cfg.bev_channels, rng, d_inner=cfg.ebc_inner, n_state=cfg.ebc_state,
                            branches=cfg.branches, dtype=dtype) if cfg.branches else None
        self.dec = _Decoder(cfg, rng, dtype)
        self.cioe = _Cioe(cfg, rng, dtype)
        self.heads = PredictionHeads(cfg.head_channels, rng, dtype=dtype)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def bev_features(self, images, raster=None) -> tuple[Tensor, list[Tensor]]:
        """Fused, compressed BEV features (D, nz, nx) before the EBC.

        Array images are taken in [0, 1] and normalised here; Tensor images
        are used as given.
        """
        g = self.cfg.grid
        img = images if isinstance(images, Tensor) else Tensor(normalize_images(images).astype(self.dtype))
        f_p, feats = self.enc(img)
        bev = collapse_y(lift(f_p, self.lifter))
        if self.cfg.raster_channels:
            if raster is None:
                raise ValueError("model was configured with a point raster but none was given")
            r = raster.data if isinstance(raster, PointCloudRaster) else np.asarray(raster)
            bev = fuse(bev, Tensor(preprocess_raster(r).astype(self.dtype)))
        fused = self.fuse(ops.reshape(bev, (1, bev.shape[0], g.nz, g.nx)))
        return ops.reshape(fused, (self.cfg.bev_channels, g.nz, g.nx)), feats

    def forward(self, images, raster=None) -> HeadOutputs:
        g = self.cfg.grid
        f_b, feats = self.bev_features(images, raster)
        f_eb = self.ebc(f_b) if self.ebc is not None else f_b
        c_f = self.dec(ops.reshape(f_eb, (1,) + f_eb.shape))
        center = ops.sigmoid(self.heads.center(c_f))
        enhanced = c_f
        extras = {}
        if self.cioe.attn is not None:
            last = feats[-1]
            tokens = ops.reshape(ops.transpose(last, (0, 2, 3, 1)), (-1, last.shape[1]))
            heat = ops.reshape(center, (g.nz * g.nx, 1))
            att = self.cioe.attn(heat, tokens)
            att = ops.reshape(ops.transpose(att, (1, 0)), (1, self.cfg.head_channels, g.nz, g.nx))
            enhanced = ops.add(enhanced, att)
        if self.cioe.mask is not None:
            mask = self.cioe.mask(c_f)
            extras["center_mask"] = mask
            enhanced = apply_mask(enhanced, mask)
        seg = self.heads.seg(enhanced)
        offset = self.heads.offset(enhanced)
        return HeadOutputs(ops.reshape(seg, (1, g.nz, g.nx)), ops.reshape(center, (1, g.nz, g.nx)),
                           ops.reshape(offset, (2, g.nz, g.nx)), extras)
