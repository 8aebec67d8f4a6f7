"""Differentiable suction field: Gaussian vertical lift plus pull towards the nozzle.

For a particle at ``x`` and nozzle at ``e`` the displacement per solver pass is

    up * K exp(-dx^2 / 2 sx^2 - dz^2 / 2 sz^2) / (2 pi sx sz)  +  (e - x) / (|e - x| (|e - x|^2 + d))

with ``dx``, ``dz`` the horizontal offsets. The pull is zeroed inside the
``dist_floor`` ball around the nozzle.
"""
import math

import numpy as np
from numba import njit

from .scenes import SuctionParams  # noqa: F401


@njit(cache=True)
def _suction_kernel(p, e, up, K, sx, sz, D, floor):
    n = p.shape[0]
    out = np.empty((n, 3))
    norm = K / math.sqrt((2.0 * math.pi) ** 2 * sx * sx * sz * sz)
    for i in range(n):
        ox = p[i, 0] - e[0]
        oz = p[i, 2] - e[2]
        lift = norm * math.exp(-ox * ox / (2.0 * sx * sx) - oz * oz / (2.0 * sz * sz))
        d0 = e[0] - p[i, 0]
        d1 = e[1] - p[i, 1]
        d2 = e[2] - p[i, 2]
        r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        f = 0.0
        if r >= floor and r > 0.0:
            f = 1.0 / (r * (r * r + D))
        out[i, 0] = up[0] * lift + f * d0
        out[i, 1] = up[1] * lift + f * d1
        out[i, 2] = up[2] * lift + f * d2
    return out


@njit(cache=True)
def _suction_vjp_kernel(g, p, e, up, K, sx, sz, D, floor):
    n = p.shape[0]
    pbar = np.zeros((n, 3))
    ebar = np.zeros(3)
    norm = K / math.sqrt((2.0 * math.pi) ** 2 * sx * sx * sz * sz)
    for i in range(n):
        ox = p[i, 0] - e[0]
        oz = p[i, 2] - e[2]
        lift = norm * math.exp(-ox * ox / (2.0 * sx * sx) - oz * oz / (2.0 * sz * sz))
        gl = (g[i, 0] * up[0] + g[i, 1] * up[1] + g[i, 2] * up[2]) * lift
        bx = -gl * ox / (sx * sx)
        bz = -gl * oz / (sz * sz)
        pbar[i, 0] += bx
        pbar[i, 2] += bz
        ebar[0] -= bx
        ebar[2] -= bz
        d0 = e[0] - p[i, 0]
        d1 = e[1] - p[i, 1]
        d2 = e[2] - p[i, 2]
        r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        if r >= floor and r > 0.0:
            # f(r) d with f = 1 / (r (r^2 + D)); the Jacobian in d is symmetric
            s = r * r + D
            f = 1.0 / (r * s)
            fp = -(3.0 * r * r + D) / (r * r * s * s)
            c = fp * (d0 * g[i, 0] + d1 * g[i, 1] + d2 * g[i, 2]) / r
            b0 = f * g[i, 0] + c * d0
            b1 = f * g[i, 1] + c * d1
            b2 = f * g[i, 2] + c * d2
            pbar[i, 0] -= b0
            pbar[i, 1] -= b1
            pbar[i, 2] -= b2
            ebar[0] += b0
            ebar[1] += b1
            ebar[2] += b2
    return pbar, ebar


def _args(params):
    return (float(params.strength), float(params.sigma_x), float(params.sigma_z),
            float(params.softening), float(params.dist_floor))


def upward_displacement(x, nozzle, params):
    """Vertical lift of one particle."""
    sx, sz = params.sigma_x, params.sigma_z
    ox = float(x[0]) - float(nozzle[0])
    oz = float(x[2]) - float(nozzle[2])
    return params.strength * math.exp(-ox * ox / (2 * sx * sx) - oz * oz / (2 * sz * sz)) / math.sqrt(
        (2 * math.pi) ** 2 * sx * sx * sz * sz)


def attraction_displacement(x, nozzle, params):
    """Pull of magnitude ``1 / (r^2 + d)`` along the unit vector towards the nozzle."""
    d = np.asarray(nozzle, dtype=float) - np.asarray(x, dtype=float)
    r = float(np.linalg.norm(d))
    if r < params.dist_floor or r == 0.0:
        return np.zeros(3)
    return d / r / (r * r + params.softening)


def apply_suction(p, nozzle, up, params, active=None):
    """Per-particle displacement ``up * lift + pull``; rows with ``active`` False get zero."""
    p = np.ascontiguousarray(p, dtype=np.float64).reshape(-1, 3)
    out = _suction_kernel(p, np.asarray(nozzle, dtype=np.float64), np.asarray(up, dtype=np.float64),
                          *_args(params))
    if active is not None:
        out[~np.asarray(active, dtype=bool)] = 0.0
    return out


def suction_vjp(sbar, p, nozzle, up, params):
    """Pull ``sbar`` back through :func:`apply_suction`; returns ``(p_bar, nozzle_bar)``."""
    return _suction_vjp_kernel(np.ascontiguousarray(sbar, dtype=np.float64), np.ascontiguousarray(p),
                               np.asarray(nozzle, dtype=np.float64), np.asarray(up, dtype=np.float64),
                               *_args(params))
