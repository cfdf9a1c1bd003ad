"""Losses, uncertainty weighting, AdamW, the one-cycle schedule and the
gradient-accumulating training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .targets import Targets, make_targets  # noqa: F401  (re-exported)
from .tensor import Module, Tensor, ops, parameter, save_tensors, load_tensors
from .tensor.core import ShapeError

LOSS_NAMES = ("l_seg", "l_cen", "l_off")


def _const(arr, like: Tensor) -> np.ndarray:
    return np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype=like.dtype)


def seg_loss(logits: Tensor, seg, pos_weight: float = 1.0) -> Tensor:
    """Mean two-sided binary cross-entropy over all cells."""
    return ops.bce_with_logits(logits, _const(seg, logits), pos_weight)


def center_loss(pred: Tensor, target) -> Tensor:
    t = _const(target, pred)
    if t.shape != pred.shape:
        raise ShapeError(f"centerness target {t.shape} vs prediction {pred.shape}")
    return ops.mean(ops.square(ops.sub(pred, Tensor(t))))


def offset_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean absolute error over masked cells (both components); 0 for an empty mask.

    ``mask`` is (1, nz, nx) or (nz, nx) and is broadcast over the two channels.
    """
    t = _const(target, pred)
    m = np.asarray(mask, dtype=pred.dtype).reshape(pred.shape[-2:])
    if t.shape != pred.shape:
        raise ShapeError(f"offset target {t.shape} vs prediction {pred.shape}")
    count = m.sum() * pred.shape[0]
    if count == 0:
        return ops.mul(ops.sum(pred), 0.0)
    full = np.broadcast_to(m, pred.shape)
    err = ops.absolute(ops.sub(pred, Tensor(t)))
    return ops.mul(ops.sum(ops.mul(err, Tensor(np.ascontiguousarray(full)))), 1.0 / count)


class UncertaintyWeights(Module):
    """Learned log-variances ``s_k``; task ``k`` is weighted by ``exp(-s_k)``."""

    def __init__(self, s_seg: float = 0.0, s_cen: float = 0.0, s_off: float = 0.0, dtype=np.float64):
        self.s_seg = parameter(s_seg, dtype)
        self.s_cen = parameter(s_cen, dtype)
        self.s_off = parameter(s_off, dtype)

    def log_vars(self) -> list[Tensor]:
        return [self.s_seg, self.s_cen, self.s_off]

    def weights(self) -> np.ndarray:
        return np.exp(-np.array([float(s.data) for s in self.log_vars()]))


class FixedWeights(Module):
    """Constant task weights (no learnable parameters)."""

    def __init__(self, w_seg: float = 1.0, w_cen: float = 1.0, w_off: float = 1.0):
        self.w = (float(w_seg), float(w_cen), float(w_off))

    def weights(self) -> np.ndarray:
        return np.array(self.w)


def total_loss(l_seg: Tensor, l_cen: Tensor, l_off: Tensor,
               w: UncertaintyWeights | FixedWeights | None = None) -> Tensor:
    """``sum_k exp(-s_k) L_k + s_k`` for learned weights, ``sum_k w_k L_k`` for
    fixed ones, plain sum when ``w`` is None."""
    losses = (l_seg, l_cen, l_off)
    if w is None:
        w = FixedWeights()
    if isinstance(w, FixedWeights):
        out = ops.mul(losses[0], w.w[0])
        for lk, wk in zip(losses[1:], w.w[1:]):
            out = ops.add(out, ops.mul(lk, wk))
        return out
    out = None
    for lk, s in zip(losses, w.log_vars()):
        term = ops.add(ops.mul(ops.exp(ops.mul(s, -1.0)), lk), s)
        out = term if out is None else ops.add(out, term)
    return out


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01,
                 decay_filter: Callable[[Tensor], bool] | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decays = [decay_filter(p) if decay_filter else True for p in self.params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decays):
            if decay and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def one_cycle_lr(step: int, total: int, lr_max: float = 5e-4, pct_warmup: float = 0.3,
                 div_start: float = 25.0, div_final: float = 1e4) -> float:
    """Linear warmup from ``lr_max/div_start`` to ``lr_max`` over the first
    ``pct_warmup`` of steps, then cosine decay to ``lr_max/div_final``."""
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    warm = pct_warmup * total
    start, final = lr_max / div_start, lr_max / div_final
    if step < warm:
        return start + (lr_max - start) * step / warm
    span = total - 1 - warm
    progress = (step - warm) / span if span > 0 else 0.0
    return final + (lr_max - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


# training loop ----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 5e-4
    weight_decay: float = 0.01
    accumulation: int = 5
    batch_size: int = 1  # scenes per micro-batch
    loss_weighting: str = "uncertainty"  # or "fixed"
    pos_weight: float = 1.0
    log_every: int = 10
    checkpoint_every: int = 0  # 0 = only at the end
    grad_clip: float = 0.0  # 0 = off

    def __post_init__(self):
        if self.steps < 1 or self.accumulation < 1 or self.batch_size < 1:
            raise ValueError("steps, accumulation and batch_size must be positive")
        if self.loss_weighting not in ("uncertainty", "fixed"):
            raise ValueError(f"unknown loss weighting {self.loss_weighting!r}")


def _decays(p: Tensor) -> bool:
    return p.ndim >= 2


def sample_losses(model, sample, loss_weights, pos_weight: float = 1.0):
    """Forward one sample; returns (total, {name: float}) with targets filtered
    to camera-visible instances."""
    targets = sample.targets.keep(sample.targets.visibility)
    out = model(sample.rendered.images, sample.raster)
    l_seg = seg_loss(out.seg_logits, targets.seg, pos_weight)
    l_cen = center_loss(out.centerness, targets.centerness)
    l_off = offset_loss(out.offset, targets.offset, targets.offset_mask)
    tot = total_loss(l_seg, l_cen, l_off, loss_weights)
    return tot, dict(zip(LOSS_NAMES + ("total",), map(float, (l_seg.data, l_cen.data, l_off.data, tot.data))))


class Trainer:
    """Owns the model, loss weights, optimizer and schedule. Each optimizer
    step consumes ``accumulation`` samples."""

    def __init__(self, model: Module, cfg: TrainConfig, out_dir: str | Path | None = None):
        self.model = model
        self.cfg = cfg
        dtype = getattr(model, "dtype", np.float64)
        self.loss_weights = UncertaintyWeights(dtype=dtype) if cfg.loss_weighting == "uncertainty" else FixedWeights()
        self.optimizer = AdamW(self.parameters(), cfg.lr, weight_decay=cfg.weight_decay, decay_filter=_decays)
        self.step_count = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.history: list[dict] = []

    def parameters(self) -> list[Tensor]:
        return self.model.parameters() + self.loss_weights.parameters()

    def train_step(self, samples: Sequence, lr: float) -> dict:
        """Accumulate gradients over ``samples`` (mean), then one optimizer step.

        A micro-batch of ``b`` scenes averages their losses and ``k`` micro-batch
        gradients are averaged again, which equals the mean over all ``k*b``
        scenes; backward therefore runs per scene with weight ``1/(k*b)``.
        """
        k = len(samples)
        self.optimizer.zero_grad()
        sums = dict.fromkeys(LOSS_NAMES + ("total",), 0.0)
        for sample in samples:
            tot, parts = sample_losses(self.model, sample, self.loss_weights, self.cfg.pos_weight)
            tot.backward(np.asarray(1.0 / k, dtype=tot.dtype))
            for name, val in parts.items():
                sums[name] += val / k
        if self.cfg.grad_clip > 0:
            clip_gradients(self.parameters(), self.cfg.grad_clip)
        self.optimizer.step(lr)
        self.step_count += 1
        return sums

    def fit(self, samples: Iterable, callback: Callable[[int, dict], None] | None = None) -> list[dict]:
        it = iter(samples)
        cfg = self.cfg
        for step in range(cfg.steps):
            batch = [next(it) for _ in range(cfg.accumulation * cfg.batch_size)]
            lr = one_cycle_lr(step, cfg.steps, cfg.lr)
            row = {"step": step, "lr": lr, **self.train_step(batch, lr)}
            if not all(np.isfinite(v) for v in row.values()):
                raise FloatingPointError(f"non-finite loss at step {step}: {row}")
            self.history.append(row)
            if callback is not None:
                callback(step, row)
            if self.out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                self.save_checkpoint(self.out_dir / f"step{step + 1:06d}.ckpt")
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.save_checkpoint(self.out_dir / "final.ckpt")
            self.write_log(self.out_dir / "train_log.csv")
        return self.history

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "lr", *LOSS_NAMES, "total"])
            w.writeheader()
            for i, row in enumerate(self.history):
                if i % self.cfg.log_every == 0 or i == len(self.history) - 1:
                    w.writerow({k: row[k] for k in w.fieldnames})

    def state(self) -> dict[str, np.ndarray]:
        state = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        state.update({f"loss.{k}": v for k, v in self.loss_weights.state_dict().items()})
        return state

    def save_checkpoint(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_tensors(path, self.state())

    def load_checkpoint(self, path: str | Path) -> None:
        load_into(self.model, path, self.loss_weights)


def load_into(model: Module, path: str | Path, loss_weights: Module | None = None) -> None:
    """Restore model (and optionally loss-weight) parameters from a checkpoint."""
    state = load_tensors(path)
    model.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})
    if loss_weights is not None:
        loss_weights.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("loss.")},
                                     strict=False)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / norm
    return norm
