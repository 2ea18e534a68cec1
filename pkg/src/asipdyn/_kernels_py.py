"""Numpy implementation of the orbit kernel (fallback for :mod:`asipdyn._kernels`).

The loop runs over time and is vectorized over trajectories.  Every floating
point operation mirrors the compiled kernel, so both produce the same bits.
"""
from __future__ import annotations

import math
from itertools import repeat

import numpy as np

REFRESH = 2.0 ** -53
FLOOR = float(np.nextafter(0.0, 1.0))
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(state: np.ndarray) -> np.ndarray:
    state += _GOLDEN
    z = state.copy()
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _step(code: int, x: np.ndarray, p: np.ndarray, c: float) -> np.ndarray:
    if code == 0:
        return np.where(x < 0.5, 2.0 * x, 2.0 * x - 1.0)
    if code == 1:
        return np.where(x < 0.5, 2.0 * x, 2.0 - 2.0 * x)
    if code == 2:
        nb = (len(p) - 1) // 2
        bp, slopes = p[:nb + 1], p[nb + 1:]
        k = np.clip(np.searchsorted(bp[:nb], x, side="right") - 1, 0, nb - 1)
        return slopes[k] * (x - bp[k])
    # math.pow is the C library pow used by the compiled kernel; numpy's own
    # power routine can differ in the last bit.
    xg = np.fromiter(map(math.pow, x.tolist(), repeat(float(p[0]))), dtype=float, count=len(x))
    left = x * (1.0 + c * xg)
    return np.where(x < 0.5, left, 2.0 * x - 1.0)


def orbit_block(code: int, params: np.ndarray, x: np.ndarray, rng: np.ndarray,
                out: np.ndarray, refresh: bool) -> None:
    """Fill ``out`` (R x L) with orbit points and advance ``x`` and ``rng`` in place."""
    p = np.asarray(params, dtype=float)
    c = math.pow(2.0, float(p[0])) if code == 3 else 0.0
    xi = x.copy()
    with np.errstate(over="ignore"):
        for t in range(out.shape[1]):
            if code == 3:
                xi = np.maximum(xi, FLOOR)
            out[:, t] = xi
            xi = _step(code, xi, p, c)
            if refresh:
                z = _splitmix(rng)
                xi = np.where((z >> np.uint64(63)) != 0, xi + REFRESH, xi)
            xi = np.clip(xi, 0.0, 1.0)
    x[:] = xi
