"""Encoder, decoder, centre-informed enhancement and prediction heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Conv2d, ConvNormAct, Linear, Module, Tensor, ops, parameter
from .tensor.core import ShapeError


@dataclass(frozen=True)
class OsaStageConfig:
    """Per-stage widths of the image encoder."""

    stage_channels: tuple[int, ...] = (32, 64, 96)
    layer_widths: tuple[int, ...] = (16, 32, 48)
    layers_per_block: int = 3
    blocks_per_stage: tuple[int, ...] = (1, 1, 1)
    stem_channels: tuple[int, int] = (16, 16)

    @classmethod
    def full_scale(cls) -> "OsaStageConfig":
        return cls((256, 512, 768), (128, 160, 192), 5, (1, 3, 9), (64, 64))

    def aggregate_width(self, stage: int) -> int:
        """Channels entering the 1x1 projection of an OSA block."""
        return self.stage_channels[stage] + self.layers_per_block * self.layer_widths[stage]


def ese(f_in: Tensor, x: Tensor, fc: Linear) -> Tensor:
    """``f_in + hsigmoid(fc(avgpool(x))) * x`` with per-channel weights."""
    if f_in.shape != x.shape:
        raise ShapeError(f"eSE operands differ: {f_in.shape} vs {x.shape}")
    w = ops.hsigmoid(fc(ops.global_avg_pool(x)))
    return ops.add(f_in, ops.scale_channels(x, w))


class OSABlock(Module):
    """Conv chain whose input and every intermediate output are concatenated
    once, projected by 1x1, and added back through eSE channel attention."""

    def __init__(self, channels: int, layer_width: int, n_layers: int, rng, dtype=np.float64):
        self.convs = []
        c = channels
        for _ in range(n_layers):
            self.convs.append(ConvNormAct(c, layer_width, 3, rng, dtype=dtype))
            c = layer_width
        self.aggregate_width = channels + n_layers * layer_width
        self.project = ConvNormAct(self.aggregate_width, channels, 1, rng, dtype=dtype)
        self.fc = Linear(channels, channels, rng, dtype=dtype)

    def aggregate(self, x: Tensor) -> Tensor:
        outs, h = [x], x
        for conv in self.convs:
            h = conv(h)
            outs.append(h)
        return ops.concat(outs, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return ese(x, self.project(self.aggregate(x)), self.fc)


class ImageEncoder(Module):
    """Stem (3x3 convs, strides 2/1/2) and OSA stages; stage transitions halve
    resolution. Returns the per-stage feature maps."""

    def __init__(self, cfg: OsaStageConfig, rng, in_channels: int = 3, dtype=np.float64):
        s0, s1 = cfg.stem_channels
        self.stem = [ConvNormAct(in_channels, s0, 3, rng, stride=2, dtype=dtype),
                     ConvNormAct(s0, s1, 3, rng, stride=1, dtype=dtype),
                     ConvNormAct(s1, cfg.stage_channels[0], 3, rng, stride=2, dtype=dtype)]
        self.transitions = []
        self.stages = []
        prev = cfg.stage_channels[0]
        for i, c in enumerate(cfg.stage_channels):
            if i > 0:
                self.transitions.append(ConvNormAct(prev, c, 3, rng, stride=2, dtype=dtype))
            self.stages.append([OSABlock(c, cfg.layer_widths[i], cfg.layers_per_block, rng, dtype)
                                for _ in range(cfg.blocks_per_stage[i])])
            prev = c

    def run_stem(self, x: Tensor) -> Tensor:
        for layer in self.stem:
            x = layer(x)
        return x

    def forward(self, images: Tensor) -> list[Tensor]:
        x = self.run_stem(images)
        feats = []
        for i, blocks in enumerate(self.stages):
            if i > 0:
                x = self.transitions[i - 1](x)
            for blk in blocks:
                x = blk(x)
            feats.append(x)
        return feats


class FeatureNeck(Module):
    """Merges stage outputs at the stride of the first stage (1x1 laterals, upsample, sum)."""

    def __init__(self, stage_channels: Sequence[int], out_channels: int, rng, dtype=np.float64):
        self.laterals = [Conv2d(c, out_channels, 1, rng, dtype=dtype) for c in stage_channels]

    def forward(self, feats: Sequence[Tensor]) -> Tensor:
        y = self.laterals[-1](feats[-1])
        for i in range(len(feats) - 2, -1, -1):
            lat = self.laterals[i](feats[i])
            up = ops.upsample2x(y)
            # odd sizes round up on the way down; crop the surplus row/column
            up = ops.slice_axis(ops.slice_axis(up, 0, lat.shape[2], 2), 0, lat.shape[3], 3)
            y = ops.add(up, lat)
        return y


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng, stride: int = 1, dtype=np.float64):
        self.conv1 = ConvNormAct(c_in, c_out, 3, rng, stride=stride, dtype=dtype)
        self.conv2 = ConvNormAct(c_out, c_out, 3, rng, dtype=dtype, act=False)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = ConvNormAct(c_in, c_out, 1, rng, stride=stride, dtype=dtype, act=False)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(self.conv1(x))
        s = self.shortcut(x) if self.shortcut is not None else x
        return ops.relu(ops.add(y, s))


def decode(deep: Tensor, skips: Sequence[Tensor], laterals: Sequence[Module] | None = None) -> Tensor:
    """Summative skip decoding: ``U_i = Upsample(U_{i+1}) + S_i`` for i = 2, 1, 0.

    ``deep`` is ``U_3``; ``skips`` are ``S_0..S_2``, each half the resolution of
    the previous. ``laterals[i]`` (optional) maps ``U_{i+1}``'s channels onto
    ``S_i``'s before upsampling.
    """
    u = deep
    for i in range(len(skips) - 1, -1, -1):
        if laterals is not None and laterals[i] is not None:
            u = laterals[i](u)
        up = ops.upsample2x(u)
        if up.shape != skips[i].shape:
            raise ShapeError(f"decoder level {i}: upsampled {up.shape} vs skip {skips[i].shape}")
        u = ops.add(up, skips[i])
    return u


class BevDecoder(Module):
    """Residual BEV trunk producing skips at strides 1, 2, 4 (and the stride-8
    deepest map), then summative upsampling back to full resolution."""

    def __init__(self, c_in: int, widths: Sequence[int], rng, dtype=np.float64):
        c0, c1, c2, c3 = widths
        self.layer0 = ResBlock(c_in, c0, rng, 1, dtype)
        self.layer1 = ResBlock(c0, c1, rng, 2, dtype)
        self.layer2 = ResBlock(c1, c2, rng, 2, dtype)
        self.layer3 = ResBlock(c2, c3, rng, 2, dtype)
        self.laterals = [Conv2d(c1, c0, 1, rng, dtype=dtype), Conv2d(c2, c1, 1, rng, dtype=dtype),
                         Conv2d(c3, c2, 1, rng, dtype=dtype)]

    def forward(self, x: Tensor) -> Tensor:
        s0 = self.layer0(x)
        s1 = self.layer1(s0)
        s2 = self.layer2(s1)
        deep = self.layer3(s2)
        return decode(deep, [s0, s1, s2], self.laterals)


class CenterMask(Module):
    """Spatial attention: [channel max, channel mean] -> 7x7 conv -> sigmoid."""

    def __init__(self, rng, kernel: int = 7, dtype=np.float64):
        self.conv = Conv2d(2, 1, kernel, rng, dtype=dtype)

    def forward(self, c_f: Tensor) -> Tensor:
        pooled = ops.concat([ops.channel_max(c_f), ops.channel_mean(c_f)], axis=1)
        return ops.sigmoid(self.conv(pooled))


def apply_mask(x: Tensor, mask: Tensor) -> Tensor:
    """Gate (B, C, H, W) features with a (B, 1, H, W) mask."""
    return ops.mul(x, ops.expand(mask, 1, x.shape[1]))


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Dense scaled dot-product attention; returns (output, attention weights)."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes q {q.shape}, k {k.shape}, v {v.shape}")
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (1, 0))), 1.0 / np.sqrt(q.shape[1]))
    weights = ops.softmax_lastdim(scores)
    return ops.matmul(weights, v), weights


class CenterQueryAttention(Module):
    """Cross-attention whose queries are the centerness heatmap (plus learned
    per-cell positional embeddings) and whose keys/values are multi-view image
    tokens."""

    def __init__(self, n_queries: int, heat_channels: int, pos_dim: int, token_channels: int,
                 out_channels: int, key_dim: int, rng, dtype=np.float64):
        self.pos = parameter(np.zeros((n_queries, pos_dim)), dtype)
        self.w_q = Linear(heat_channels + pos_dim, key_dim, rng, bias=False, dtype=dtype)
        self.w_k = Linear(token_channels, key_dim, rng, bias=False, dtype=dtype)
        self.w_v = Linear(token_channels, out_channels, rng, bias=False, dtype=dtype)
        self.last_weights: np.ndarray | None = None

    def forward(self, heat: Tensor, tokens: Tensor) -> Tensor:
        """``heat`` (Nq, C) and ``tokens`` (T, c_tok) -> (Nq, out_channels)."""
        if heat.shape[0] != self.pos.shape[0]:
            raise ShapeError(f"{heat.shape[0]} heatmap queries but {self.pos.shape[0]} positional embeddings")
        q = self.w_q(ops.concat([heat, self.pos], axis=1))
        out, weights = attention(q, self.w_k(tokens), self.w_v(tokens))
        self.last_weights = weights.data
        return out


@dataclass
class HeadOutputs:
    seg_logits: Tensor
    centerness: Tensor
    offset: Tensor
    extras: dict = field(default_factory=dict)


class Head(Module):
    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float64):
        self.conv = Conv2d(c_in, c_in, 3, rng, dtype=dtype)
        self.out = Conv2d(c_in, c_out, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(ops.relu(self.conv(x)))


class PredictionHeads(Module):
    """Segmentation, centerness (sigmoid) and offset heads."""

    def __init__(self, channels: int, rng, dtype=np.float64):
        self.seg = Head(channels, 1, rng, dtype)
        self.center = Head(channels, 1, rng, dtype)
        self.offset = Head(channels, 2, rng, dtype)

    def forward(self, f: Tensor, seg_input: Tensor | None = None) -> HeadOutputs:
        seg_in = f if seg_input is None else seg_input
        return HeadOutputs(self.seg(seg_in), ops.sigmoid(self.center(f)), self.offset(seg_in))
