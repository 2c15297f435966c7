"""Conic covering of the plane and the per-region S-procedure multiplier.

Region ``c`` is ``R_c = {x : x^T Q_c x >= 0}`` with
``Q_c = d_c d_c^T - cos^2(theta) I``: the double cone of half-angle
``theta`` around the axis ``d_c``. Regions are indexed from 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DimensionError, DomainError

EPS_BRACKET = (1e-9, 1e9)
EPS_TOL = 1e-8
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class ConicPartition:
    axes: np.ndarray      # (N,) axis angles in [0, pi)
    half_angle: float
    regions: np.ndarray   # (N, 2, 2) the Q_c matrices
    overlap: float = 0.0

    @property
    def N(self):
        return len(self.axes)

    @property
    def n(self):
        return self.regions.shape[1]

    def directions(self):
        return np.stack([np.cos(self.axes), np.sin(self.axes)], axis=1)


def build_partition(n, N, overlap=1e-6):
    """``N`` equal sectors of the plane, widened by the relative ``overlap``."""
    if n != 2:
        raise DimensionError(f"conic partitions are only implemented for n = 2, got n = {n}")
    if N < 1:
        raise DomainError(f"need at least one region, got {N}")
    axes = (np.arange(1, N + 1) - 0.5) * math.pi / N
    # a single region is the whole plane: cap at pi/2 so Q stays PSD
    theta = min(math.pi / (2 * N) * (1 + overlap), math.pi / 2)
    d = np.stack([np.cos(axes), np.sin(axes)], axis=1)
    Q = np.einsum("ci,cj->cij", d, d) - math.cos(theta) ** 2 * np.eye(2)
    return ConicPartition(axes=axes, half_angle=theta, regions=Q, overlap=overlap)


def region_values(partition, x):
    """``x^T Q_c x`` for every region."""
    x = np.asarray(x, dtype=float)
    return np.einsum("i,cij,j->c", x, partition.regions, x)


def region_of(partition, x):
    """Lowest-index region containing ``x`` (region 0 for ``x = 0``)."""
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        return 0
    hits = np.flatnonzero(region_values(partition, x) >= 0)
    if len(hits) == 0:
        # covering guarantees a hit up to round-off; fall back to the nearest axis
        return int(np.argmax(region_values(partition, x)))
    return int(hits[0])


def epsilon_search(W, Q, bracket=EPS_BRACKET, tol=EPS_TOL, iters=200):
    """Find ``eps > 0`` with ``lambda_min(-W - eps Q) >= -tol``, or ``None``.

    ``eps -> lambda_min(-W - eps Q)`` is concave, so golden-section search
    on ``log10(eps)`` over ``bracket`` finds its maximum. The lower end of
    the bracket is tried first, and the search stops at the first strictly
    feasible point.
    """
    W = linalg.symmetrize(W)
    Q = linalg.symmetrize(Q)

    def g(u):
        return linalg.min_eig(-W - 10.0 ** u * Q)

    lo, hi = math.log10(bracket[0]), math.log10(bracket[1])
    best_u, best = lo, g(lo)
    if best >= 0:
        return 10.0 ** lo
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    gc, gd = g(c), g(d)
    for _ in range(iters):
        for u, val in ((c, gc), (d, gd)):
            if val > best:
                best_u, best = u, val
        if best >= 0 or b - a < 1e-12:
            break
        if gc >= gd:
            b, d, gd = d, c, gc
            c = b - _GOLDEN * (b - a)
            gc = g(c)
        else:
            a, c, gc = c, d, gd
            d = a + _GOLDEN * (b - a)
            gd = g(d)
    hi_val = g(hi)
    if hi_val > best:
        best_u, best = hi, hi_val
    return 10.0 ** best_u if best >= -tol else None


def form_coefficients(S):
    """Write ``x(a)^T S x(a)`` on the unit circle as ``m + r cos(2a - phase)``.

    ``S`` is a stack ``(..., 2, 2)`` of symmetric matrices.
    """
    s11, s12, s22 = S[..., 0, 0], 0.5 * (S[..., 0, 1] + S[..., 1, 0]), S[..., 1, 1]
    m = 0.5 * (s11 + s22)
    half = 0.5 * (s11 - s22)
    return m, np.hypot(half, s12), np.arctan2(s12, half)


def min_form_on_region(coeffs, partition, c):
    """Exact minimum of ``x^T S x`` over unit vectors of region ``c`` (planar only).

    ``coeffs`` comes from :func:`form_coefficients`. The cone is the arc
    ``[axis - theta, axis + theta]`` (mod pi); the minimum sits at the
    minimizing eigen-direction of ``S`` if that lies on the arc, otherwise
    at an arc endpoint.
    """
    m, r, phase = coeffs
    axis, theta = partition.axes[c], partition.half_angle
    # minimizer of cos(2a - phase) is 2a = phase + pi
    delta = np.mod(phase + math.pi - 2 * axis + math.pi, 2 * math.pi) - math.pi
    inside = np.abs(delta) <= 2 * theta
    ends = np.minimum(np.cos(2 * (axis - theta) - phase), np.cos(2 * (axis + theta) - phase))
    return np.where(inside, m - r, m + r * ends)
