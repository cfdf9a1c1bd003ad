"""Discretisation and the selective state-space scan."""
from __future__ import annotations

import numpy as np
from numba import njit
from scipy import integrate

from ..tensor import Tensor
from ..tensor.core import ShapeError, make_result


def discretize(a, b, delta):
    """Zero-order-hold state matrix and the Euler input matrix.

    Returns ``(exp(delta * a), delta * b)``.
    """
    a, b, delta = np.asarray(a, float), np.asarray(b, float), np.asarray(delta, float)
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    return np.exp(delta * a), delta * b


def zoh_input_exact(a: float, b: float, delta: float) -> float:
    """Exact ZOH input matrix, integral_0^delta exp(a tau) d tau * b, by quadrature."""
    val, _ = integrate.quad(lambda tau: np.exp(a * tau), 0.0, delta)
    return val * b


@njit(cache=True)
def _scan_forward(x, delta, a, b, c, d):
    length, dim = x.shape
    n = a.shape[1]
    hs = np.empty((length, dim, n), dtype=x.dtype)
    y = np.empty((length, dim), dtype=x.dtype)
    h = np.zeros((dim, n), dtype=x.dtype)
    for t in range(length):
        for ch in range(dim):
            dt = delta[t, ch]
            xt = x[t, ch]
            acc = 0.0
            for s in range(n):
                hv = np.exp(dt * a[ch, s]) * h[ch, s] + dt * b[t, s] * xt
                h[ch, s] = hv
                hs[t, ch, s] = hv
                acc += hv * c[t, s]
            y[t, ch] = acc + d[ch] * xt
    return y, hs


@njit(cache=True)
def _scan_backward(x, delta, a, b, c, d, hs, gy):
    length, dim = x.shape
    n = a.shape[1]
    gx = np.zeros_like(x)
    gdelta = np.zeros_like(delta)
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    gc = np.zeros_like(c)
    gd = np.zeros_like(d)
    gh = np.zeros((dim, n), dtype=x.dtype)
    for t in range(length - 1, -1, -1):
        for ch in range(dim):
            dt = delta[t, ch]
            xt = x[t, ch]
            g = gy[t, ch]
            gd[ch] += g * xt
            gxt = g * d[ch]
            gdt = 0.0
            for s in range(n):
                ght = gh[ch, s] + g * c[t, s]
                gc[t, s] += g * hs[t, ch, s]
                hprev = hs[t - 1, ch, s] if t > 0 else 0.0
                decay = np.exp(dt * a[ch, s])
                gdt += ght * (hprev * decay * a[ch, s] + b[t, s] * xt)
                ga[ch, s] += ght * hprev * decay * dt
                gb[t, s] += ght * dt * xt
                gxt += ght * dt * b[t, s]
                gh[ch, s] = ght * decay
            gx[t, ch] = gxt
            gdelta[t, ch] = gdt
    return gx, gdelta, ga, gb, gc, gd


def selective_scan(x: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """Input-dependent linear recurrence, per channel and state lane.

    Shapes: ``x``, ``delta`` (L, d_in); ``a`` (d_in, n); ``b``, ``c`` (L, n);
    ``d`` (d_in,). With ``h_0 = 0``::

        h_t = exp(delta_t * a) * h_{t-1} + delta_t * b_t * x_t
        y_t = <c_t, h_t> + d * x_t
    """
    length, dim = x.shape
    if delta.shape != x.shape or a.ndim != 2 or a.shape[0] != dim:
        raise ShapeError(f"scan shape mismatch: x {x.shape}, delta {delta.shape}, A {a.shape}")
    n = a.shape[1]
    if b.shape != (length, n) or c.shape != (length, n) or d.shape != (dim,):
        raise ShapeError(f"scan shape mismatch: B {b.shape}, C {c.shape}, D {d.shape}")
    dt = x.dtype
    arrs = [np.ascontiguousarray(t.data, dtype=dt) for t in (x, delta, a, b, c, d)]
    y, hs = _scan_forward(*arrs)

    def backward(g):
        return _scan_backward(*arrs, hs, np.ascontiguousarray(g, dtype=dt))

    return make_result(y, (x, delta, a, b, c, d), backward)
