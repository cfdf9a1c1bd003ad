"""Central finite-difference gradient checking.

The checked scalar is ``sum(w * fn())`` for a fixed random weighting ``w``,
so ops whose plain sum is constant (softmax, normalisation) still get a
non-trivial probe.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .core import Tensor, no_grad, use_tape


def _probe(out: np.ndarray, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=out.shape)


def _coords(size: int, max_coords: int | None, seed: int) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(np.random.default_rng(seed + 1).choice(size, max_coords, replace=False))


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5, seed: int = 0,
                   coords: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient of ``sum(w * fn())`` wrt ``x`` (perturbs ``x.data`` in place).

    Only the flat indices in ``coords`` are estimated (all by default); the rest stay zero."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        w = _probe(fn().data, seed)
        for i in (range(flat.size) if coords is None else coords):
            old = flat[i]
            flat[i] = old + h
            fp = float((fn().data * w).sum())
            flat[i] = old - h
            fm = float((fn().data * w).sum())
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return g


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor], seed: int = 0) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    with use_tape() as tape:
        out = fn()
        loss = ops.sum(ops.mul(out, Tensor(_probe(out.data, seed).astype(out.dtype))))
        tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """max |a - b| / max(|a|, |b|, floor); the floor keeps near-zero entries from dominating."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5, seed: int = 0,
                    max_coords: int | None = None) -> float:
    """Worst relative error between analytic and numerical gradients over ``inputs``.

    With ``max_coords``, tensors larger than that are checked on a random
    subset of that many entries (drawn from ``seed``)."""
    ana = analytic_grads(fn, inputs, seed)
    worst = 0.0
    for j, (t, ga) in enumerate(zip(inputs, ana)):
        idx = _coords(t.data.size, max_coords, seed * 1009 + j)
        gn = numerical_grad(fn, t, h, seed, idx)
        worst = max(worst, max_rel_error(ga.reshape(-1)[idx], gn.reshape(-1)[idx]))
    return worst
