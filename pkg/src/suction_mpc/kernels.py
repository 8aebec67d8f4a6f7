"""SPH smoothing kernels used by the fluid solver.

All kernels are written for 3D with a compact support of radius ``h``.
The scalar-argument ``*_nb`` variants are numba-compiled and are the ones
used inside the per-pair loops; the public functions accept any 3-vector.
"""
import math

import numpy as np
from numba import njit

# singularity guard shared with the suction field
DIST_FLOOR = 1e-6

POLY6_FACTOR = 315.0 / (64.0 * math.pi)
SPIKY_GRAD_FACTOR = 45.0 / math.pi


@njit(cache=True, inline="always")
def poly6_nb(r2, h):
    h2 = h * h
    if r2 >= h2:
        return 0.0
    d = h2 - r2
    return POLY6_FACTOR / h**9 * d * d * d


@njit(cache=True, inline="always")
def poly6_dr2_nb(r2, h):
    """Derivative of poly6 with respect to the squared distance."""
    h2 = h * h
    if r2 >= h2:
        return 0.0
    d = h2 - r2
    return -3.0 * POLY6_FACTOR / h**9 * d * d


@njit(cache=True, inline="always")
def spiky_mag_nb(dist, h):
    """Radial magnitude (45 / pi h^6) (h - |r|)^2, zero outside support."""
    if dist >= h or dist < DIST_FLOOR:
        return 0.0
    d = h - dist
    return SPIKY_GRAD_FACTOR / h**6 * d * d


@njit(cache=True, inline="always")
def spiky_mag_deriv_nb(dist, h):
    if dist >= h or dist < DIST_FLOOR:
        return 0.0
    return -2.0 * SPIKY_GRAD_FACTOR / h**6 * (h - dist)


def poly6(r, h):
    """Poly6 density kernel ``315 / (64 pi h^9) (h^2 - |r|^2)^3`` for ``|r| < h``."""
    r = np.asarray(r, dtype=np.float64)
    return float(poly6_nb(float(r @ r), float(h)))


def spiky_gradient(r, h):
    """Spiky gradient ``45 / (pi h^6) (h - |r|)^2 r / |r|``.

    Note the sign: this points along ``r`` (away from the neighbour). The
    true derivative of the Spiky kernel is its negative, which is what the
    density solver applies.
    """
    r = np.asarray(r, dtype=np.float64)
    dist = math.sqrt(float(r @ r))
    mag = spiky_mag_nb(dist, float(h))
    if mag == 0.0:
        return np.zeros(3)
    return mag * r / dist


def scorr(r, h, k=0.1, n=4, dq_ratio=0.3):
    """Artificial-pressure term ``-k (W(r) / W(dq))^n`` with ``dq = dq_ratio * h``."""
    r = np.asarray(r, dtype=np.float64)
    w_dq = poly6_nb((dq_ratio * h) ** 2, h)
    return -k * (poly6_nb(float(r @ r), float(h)) / w_dq) ** n
