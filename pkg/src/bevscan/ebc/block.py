"""Environment-aware BEV compressor: patch tokens scanned along three orders."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..geometry import BevGrid
from ..tensor import LayerNorm, Linear, Module, Tensor, ops, parameter
from ..tensor.core import ShapeError
from .permutation import PatchPermutation, ScanKind, build_permutation
from .scan import selective_scan


def patchify(f: Tensor, patch: int = 2) -> Tensor:
    """(D, nz, nx) -> (L, patch*patch*D), raster order over patches.

    Each row is the patch flattened as (dz, dx, channel).
    """
    d, nz, nx = f.shape
    if nz % patch or nx % patch:
        raise ShapeError(f"spatial dims {nz}x{nx} must be divisible by {patch}")
    pz, px = nz // patch, nx // patch
    t = ops.reshape(f, (d, pz, patch, px, patch))
    t = ops.transpose(t, (1, 3, 2, 4, 0))
    return ops.reshape(t, (pz * px, patch * patch * d))


def unpatchify(tokens: Tensor, nz: int, nx: int, patch: int = 2) -> Tensor:
    """Inverse layout of :func:`patchify`."""
    pz, px = nz // patch, nx // patch
    d = tokens.shape[1] // (patch * patch)
    if tokens.shape[0] != pz * px or tokens.shape[1] != patch * patch * d:
        raise ShapeError(f"cannot fold tokens {tokens.shape} into {nz}x{nx}")
    t = ops.reshape(tokens, (pz, px, patch, patch, d))
    t = ops.transpose(t, (4, 0, 2, 1, 3))
    return ops.reshape(t, (d, nz, nx))


def inverse_softplus(v: np.ndarray) -> np.ndarray:
    return v + np.log(-np.expm1(-v))


class SsmBranch(Module):
    """One scan branch: causal conv + SiLU on the input, per-token B, C and
    step size, then the selective scan."""

    def __init__(self, d_in: int, n_state: int, rng: np.random.Generator, conv_width: int = 4,
                 dtype=np.float64, dt_range: tuple[float, float] = (0.01, 0.1)):
        self.conv_weight = parameter(rng.uniform(-1, 1, (d_in, conv_width)) / np.sqrt(conv_width), dtype)
        self.conv_bias = parameter(np.zeros(d_in), dtype)
        self.proj_b = Linear(d_in, n_state, rng, bias=False, dtype=dtype)
        self.proj_c = Linear(d_in, n_state, rng, bias=False, dtype=dtype)
        self.proj_dt = Linear(d_in, d_in, rng, bias=False, dtype=dtype, init_scale=0.1)
        dt0 = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), d_in))
        self.dt_bias = parameter(inverse_softplus(dt0), dtype)
        self.a_log = parameter(np.log(np.tile(np.arange(1, n_state + 1, dtype=float), (d_in, 1))), dtype)
        self.d_skip = parameter(np.ones(d_in), dtype)

    def state_matrix(self) -> Tensor:
        return ops.mul(ops.exp(self.a_log), -1.0)

    def scan_inputs(self, x: Tensor) -> dict[str, Tensor]:
        """Everything the recurrence consumes, for tokens ``x`` (L, d_in) in scan order."""
        xc = ops.conv1d_causal(ops.reshape(ops.transpose(x, (1, 0)), (1, x.shape[1], x.shape[0])),
                               self.conv_weight, self.conv_bias)
        xs = ops.silu(ops.transpose(ops.reshape(xc, (x.shape[1], x.shape[0])), (1, 0)))
        delta = ops.softplus(ops.add_bias(self.proj_dt(x), self.dt_bias, -1))
        return {"x": xs, "delta": delta, "a": self.state_matrix(),
                "b": self.proj_b(x), "c": self.proj_c(x), "d": self.d_skip}

    def forward(self, x: Tensor) -> Tensor:
        p = self.scan_inputs(x)
        return selective_scan(p["x"], p["delta"], p["a"], p["b"], p["c"], p["d"])


class EBCBlock(Module):
    """Patch tokens -> norm -> x/z projections -> three scan branches, each in
    its own serial order -> SiLU(z) gating -> sum -> output projection ->
    folded back to the grid and added to the input."""

    def __init__(self, grid: BevGrid, channels: int, rng: np.random.Generator, d_inner: int | None = None,
                 n_state: int = 8, embed_dim: int | None = None, patch: int = 2,
                 branches: Sequence[str] = ("forward", "forward_surround", "backward_surround"),
                 dtype=np.float64):
        self.grid, self.channels, self.patch = grid, channels, patch
        embed = embed_dim or channels
        d_in = d_inner or channels
        self.patch_embed = Linear(patch * patch * channels, embed, rng, dtype=dtype)
        self.norm = LayerNorm(embed, dtype=dtype)
        self.proj_x = Linear(embed, d_in, rng, dtype=dtype)
        self.proj_z = Linear(embed, d_in, rng, dtype=dtype)
        self.branches = {str(ScanKind(k).value): SsmBranch(d_in, n_state, rng, dtype=dtype) for k in branches}
        self.proj_out = Linear(d_in, embed, rng, dtype=dtype, init_scale=0.5)
        self.patch_unembed = Linear(embed, patch * patch * channels, rng, dtype=dtype)
        self.orders: dict[str, PatchPermutation] = {k: build_permutation(grid, k, patch) for k in self.branches}

    def _tokens(self, f: Tensor):
        tok = self.patch_embed(patchify(f, self.patch))
        u = self.norm(tok)
        return self.proj_x(u), self.proj_z(u)

    def branch_outputs(self, f: Tensor) -> dict[str, Tensor]:
        """Ungated per-branch outputs, already restored to raster order."""
        x, _ = self._tokens(f)
        return {k: self._run_branch(k, x) for k in self.branches}

    def _run_branch(self, kind: str, x: Tensor) -> Tensor:
        perm = self.orders[kind]
        if perm.kind is ScanKind.FORWARD:
            return self.branches[kind](x)
        y = self.branches[kind](ops.take(x, perm.order, axis=0))
        return ops.take(y, perm.inverse, axis=0)

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 3 or f.shape[0] != self.channels:
            raise ShapeError(f"expected ({self.channels}, nz, nx), got {f.shape}")
        x, z = self._tokens(f)
        gate = ops.silu(z)
        total = None
        for k in self.branches:
            y = ops.mul(self._run_branch(k, x), gate)
            total = y if total is None else ops.add(total, y)
        out = self.patch_unembed(self.proj_out(total))
        return ops.add(unpatchify(out, f.shape[1], f.shape[2], self.patch), f)
