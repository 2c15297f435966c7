"""The four self-triggering mechanisms.

Each ``decide_*`` function maps the current state to the next sampling
horizon. Online mechanisms scan every horizon of a :class:`HorizonTable`;
offline mechanisms look up a :class:`RegionPolicy` precomputed per conic
region. Among feasible horizons the one with the largest average
interval wins; ties go to the lowest horizon index unless a seeded
``numpy.random.Generator`` is passed as ``rng``.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import linalg
from .certificates import in_ellipsoid
from .errors import DomainError
from .horizons import average_interval, duration
from .partition import build_partition, epsilon_search, form_coefficients, min_form_on_region, region_of

ONLINE_UNPERTURBED = "online-unperturbed"
OFFLINE_UNPERTURBED = "offline-unperturbed"
ONLINE_PERTURBED = "online-perturbed"
OFFLINE_PERTURBED = "offline-perturbed"
FALLBACK = "fallback-Tmax"
MODES = (ONLINE_UNPERTURBED, OFFLINE_UNPERTURBED, ONLINE_PERTURBED, OFFLINE_PERTURBED)

# averages closer than this are treated as equal
TIE_TOL = 1e-9


@dataclass(frozen=True)
class TriggerDecision:
    horizon: tuple
    index: int
    feasible_count: int
    tie_count: int
    mode: str

    @property
    def average(self):
        return average_interval(self.horizon)

    @property
    def duration(self):
        return duration(self.horizon)


def worker_count(threads=None):
    if threads is None:
        threads = int(os.environ.get("SELFTRIG_THREADS", "1") or 1)
    return max(1, int(threads))


def _pick(candidates, rng):
    if rng is None:
        return int(candidates[0])
    return int(rng.choice(candidates))


def _select(feasible, averages, star, rng):
    feasible = feasible.copy()
    if star is not None:
        feasible[star] = True
    best = averages[feasible].max()
    ties = np.flatnonzero(feasible & (averages >= best - TIE_TOL))
    return _pick(ties, rng), int(feasible.sum()), len(ties)


def _star_index(cert, table):
    return table.index(cert.sigma_star) if table.space.contains(cert.sigma_star) else None


def _fallback(space):
    sigma = (space.t_max,)
    index = space.index_of(sigma) if space.contains(sigma) else -1
    return TriggerDecision(sigma, index, 1, 1, FALLBACK)


# ---------------------------------------------------------------------------
# pointwise quadratic tests, vectorized over the table
# ---------------------------------------------------------------------------

def unperturbed_values(x, cert, table):
    """``x^T (Phi^T P Phi - exp(-beta T_sigma) P) x`` for every horizon."""
    x = np.asarray(x, dtype=float)
    y = table.phis @ x
    P = cert.P
    decay = np.exp(-cert.beta * table.durations)
    return np.einsum("hi,ij,hj->h", y, P, y) - decay * float(x @ P @ x)


def _disturbance_terms(cert, lengths):
    """Per-horizon ``chi_sigma`` for the online flavour (squared sum)."""
    chi = np.empty(len(lengths))
    for L in np.unique(lengths):
        chi[lengths == L] = cert.chi_for(int(L))
    return chi


def perturbed_online_values(x, cert, table):
    """``(x;1)^T U_sigma (x;1)`` for every horizon."""
    x = np.asarray(x, dtype=float)
    y = table.phis @ x
    V = float(x @ cert.P @ x)
    decay = np.exp(-cert.beta * table.durations)
    chi = _disturbance_terms(cert, table.lengths)
    return (-np.einsum("hi,ij,hj->h", y, cert.P + cert.M, y)
            + (decay - cert.gamma) * V - chi * cert.lam + cert.gamma)


# ---------------------------------------------------------------------------
# online mechanisms
# ---------------------------------------------------------------------------

def decide_online_unperturbed(x, cert, table, rng=None):
    """Largest-average horizon with ``x^T (Phi^T P Phi - rho P) x <= 0``."""
    q = unperturbed_values(x, cert, table)
    idx, nfeas, nties = _select(q <= 0, table.averages, _star_index(cert, table), rng)
    return TriggerDecision(table.horizon(idx), idx, nfeas, nties, ONLINE_UNPERTURBED)


def decide_online_perturbed(x, cert, table, rng=None):
    """``(T_max)`` inside ``E(P, 1)``, else the best horizon passing the ``U_sigma`` test."""
    if in_ellipsoid(cert.P, 1.0, x):
        return _fallback(table.space)
    q = perturbed_online_values(x, cert, table)
    idx, nfeas, nties = _select(q >= 0, table.averages, _star_index(cert, table), rng)
    return TriggerDecision(table.horizon(idx), idx, nfeas, nties, ONLINE_PERTURBED)


# ---------------------------------------------------------------------------
# offline tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionEntry:
    region: int
    indices: tuple
    horizons: tuple
    eps: tuple
    average: float


@dataclass(frozen=True, eq=False)
class RegionPolicy:
    mode: str
    N: int
    overlap: float
    sigma_star: tuple
    entries: tuple

    def partition(self):
        return build_partition(2, self.N, self.overlap)

    def to_dict(self):
        return {
            "mode": self.mode, "N": self.N, "overlap": self.overlap,
            "sigma_star": list(self.sigma_star),
            "regions": [
                {"region": e.region, "average": e.average, "indices": list(e.indices),
                 "horizons": [list(h) for h in e.horizons], "eps": list(e.eps)}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d):
        entries = tuple(
            RegionEntry(r["region"], tuple(r["indices"]),
                        tuple(tuple(h) for h in r["horizons"]), tuple(r["eps"]), r["average"])
            for r in d["regions"]
        )
        return cls(d["mode"], d["N"], d["overlap"], tuple(d["sigma_star"]), entries)


def unperturbed_region_forms(cert, table):
    """``S_sigma = -(Phi^T P Phi - rho P)``; region-feasible iff ``x^T S x >= 0`` on the cone."""
    P = cert.P
    decay = np.exp(-cert.beta * table.durations)
    return decay[:, None, None] * P - np.einsum("hji,jk,hkl->hil", table.phis, P, table.phis)


def perturbed_region_forms(cert, table):
    """Schur-reduced offline perturbed matrices ``H_sigma`` (NaN where the
    disturbance block is not positive definite)."""
    P = cert.P
    n = P.shape[0]
    decay = np.exp(-cert.beta * table.durations)
    phis = table.phis
    H = ((decay - cert.gamma1)[:, None, None] * P
         - np.einsum("hji,jk,hkl->hil", phis, P, phis))
    lam_max = linalg.max_eig(P)
    for L in np.unique(table.lengths).astype(int):
        sel = table.lengths == L
        theta = cert.chi_for(L)
        if theta == 0:
            continue
        a = cert.gamma2 / theta
        if a <= lam_max:
            H[sel] = np.nan
            continue
        block_inv = np.linalg.inv(a * np.eye(n) - P)
        PPhi = P @ phis[sel]
        H[sel] -= np.einsum("hji,jk,hkl->hil", PPhi, block_inv, PPhi)
    if cert.gamma1 < cert.gamma2:
        H[:] = np.nan
    return H


def _build_policy(mode, cert, table, partition, S, threads):
    coeffs = form_coefficients(np.nan_to_num(S, nan=0.0))
    invalid = np.isnan(S).any(axis=(1, 2))
    coeffs = tuple(np.where(invalid, np.nan, c) for c in coeffs)
    averages = table.averages
    star = _star_index(cert, table)

    def one(c):
        valid = ~invalid
        vals = np.where(valid, min_form_on_region(coeffs, partition, c), -np.inf)
        feasible = vals >= 0
        if star is not None:
            feasible[star] = True
        Q = partition.regions[c]
        while True:
            best = averages[feasible].max()
            ties = np.flatnonzero(feasible & (averages >= best - TIE_TOL))
            kept, eps = [], []
            for i in ties:
                e = None if invalid[i] else epsilon_search(-S[i], Q)
                if e is None and i != star:
                    feasible[i] = False
                    continue
                kept.append(int(i))
                eps.append(math.nan if e is None else e)
            if kept:
                return RegionEntry(c, tuple(kept), tuple(table.horizon(i) for i in kept),
                                   tuple(eps), float(averages[kept[0]]))

    workers = worker_count(threads)
    if workers == 1:
        entries = [one(c) for c in range(partition.N)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(one, range(partition.N)))
    return RegionPolicy(mode, partition.N, partition.overlap, cert.sigma_star, tuple(entries))


def precompute_offline_unperturbed(cert, table, partition, threads=None):
    """Per region, the largest-average horizons admitting ``eps_c > 0`` with
    ``Phi^T P Phi - rho P + eps_c Q_c <= 0``.

    Candidates are screened with the exact planar cone minimum of the
    quadratic form (lossless S-procedure for a single cone) and every
    stored horizon is then certified by :func:`epsilon_search`.
    """
    S = unperturbed_region_forms(cert, table)
    return _build_policy(OFFLINE_UNPERTURBED, cert, table, partition, S, threads)


def precompute_offline_perturbed(cert, table, partition, threads=None):
    """Per region, the largest-average horizons whose three-block matrix
    (region term with the S-procedure sign) is PSD for some ``eps_c > 0``."""
    S = perturbed_region_forms(cert, table)
    return _build_policy(OFFLINE_PERTURBED, cert, table, partition, S, threads)


def decide_offline(x, policy, partition, cert, rng=None, space=None):
    """Region lookup in ``policy``; the perturbed flavour falls back to
    ``(T_max)`` inside ``E(P, 1)``."""
    if policy.mode == OFFLINE_PERTURBED and in_ellipsoid(cert.P, 1.0, x):
        if space is None:
            raise DomainError("space is required for the perturbed fallback")
        return _fallback(space)
    entry = policy.entries[region_of(partition, x)]
    k = _pick(np.arange(len(entry.indices)), rng)
    return TriggerDecision(entry.horizons[k], entry.indices[k],
                           len(entry.indices), len(entry.indices), policy.mode)


# ---------------------------------------------------------------------------
# soundness of offline decisions
# ---------------------------------------------------------------------------

def pointwise_margin(x, sigma, cert, cache, mode):
    """Signed slack of the pointwise inequality behind ``mode`` at ``x``
    (negative means violated), normalised by ``||x||^2`` for the
    homogeneous unperturbed test.

    * unperturbed: ``-x^T (Phi^T P Phi - rho P) x / ||x||^2``
    * offline perturbed: ``x^T H_sigma x + gamma1 - gamma2`` (worst case
      over the disturbance, Schur-reduced)
    * online perturbed: ``(x;1)^T U_sigma (x;1)``
    """
    from .certificates import build_U_sigma, offline_reduced_form
    from .horizons import transition

    x = np.asarray(x, dtype=float)
    phi = transition(sigma, cache)
    dur = duration(sigma)
    if mode in (ONLINE_UNPERTURBED, OFFLINE_UNPERTURBED):
        nx = float(x @ x)
        if nx == 0:
            return 0.0
        W = phi.T @ cert.P @ phi - math.exp(-cert.beta * dur) * cert.P
        return -float(x @ W @ x) / nx
    if mode == ONLINE_PERTURBED:
        z = np.append(x, 1.0)
        return float(z @ build_U_sigma(phi, dur, len(sigma), cert) @ z)
    if mode == OFFLINE_PERTURBED:
        H = offline_reduced_form(phi, dur, len(sigma), cert)
        if H is None:
            return -math.inf
        return float(x @ H @ x) + cert.gamma1 - cert.gamma2
    raise DomainError(f"unknown mode {mode!r}")
