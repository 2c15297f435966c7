"""Sampling horizons: enumeration, transition matrices and averages.

A horizon is a plain tuple of sampling intervals ``(T1, ..., Tl)`` in
chronological order. Horizons are enumerated length-major, then
lexicographically by position in ``gamma`` with the first interval most
significant; the position in that order is the horizon's *index*.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class HorizonSpace:
    """All horizons with lengths in ``[l_min, l_max]`` over the interval set ``gamma``."""

    gamma: tuple
    l_min: int
    l_max: int

    def __post_init__(self):
        gamma = tuple(float(T) for T in self.gamma)
        if not gamma:
            raise DomainError("gamma must be non-empty")
        if any(T <= 0 or not math.isfinite(T) for T in gamma):
            raise DomainError(f"sampling intervals must be positive and finite: {gamma}")
        if any(b <= a for a, b in zip(gamma, gamma[1:])):
            raise DomainError(f"gamma must be strictly increasing: {gamma}")
        if int(self.l_min) < 1 or int(self.l_max) < int(self.l_min):
            raise DomainError(f"need 1 <= l_min <= l_max, got {self.l_min}, {self.l_max}")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "l_min", int(self.l_min))
        object.__setattr__(self, "l_max", int(self.l_max))

    @property
    def t_max(self):
        return self.gamma[-1]

    def count(self):
        """Number of horizons, sum of |gamma|**l over the admissible lengths."""
        g = len(self.gamma)
        return sum(g ** l for l in range(self.l_min, self.l_max + 1))

    def _offset(self, length):
        g = len(self.gamma)
        return sum(g ** l for l in range(self.l_min, length))

    def enumerate(self):
        """Yield every horizon once, in index order.

        Each call returns a fresh generator; memory use is O(l_max).
        """
        for length in range(self.l_min, self.l_max + 1):
            yield from itertools.product(self.gamma, repeat=length)

    __iter__ = enumerate

    def __len__(self):
        return self.count()

    def contains(self, sigma):
        return (self.l_min <= len(sigma) <= self.l_max
                and all(float(T) in self.gamma for T in sigma))

    def index_of(self, sigma):
        if not self.contains(sigma):
            raise DomainError(f"{sigma} is not a horizon of this space")
        g = len(self.gamma)
        pos = {T: i for i, T in enumerate(self.gamma)}
        idx = 0
        for T in sigma:
            idx = idx * g + pos[float(T)]
        return self._offset(len(sigma)) + idx

    def horizon_at(self, index):
        index = int(index)
        if not 0 <= index < self.count():
            raise DomainError(f"horizon index {index} out of range")
        g = len(self.gamma)
        length = self.l_min
        while index >= g ** length:
            index -= g ** length
            length += 1
        digits = []
        for _ in range(length):
            index, d = divmod(index, g)
            digits.append(d)
        return tuple(self.gamma[d] for d in reversed(digits))


def duration(sigma):
    return math.fsum(sigma)


def average_interval(sigma):
    return math.fsum(sigma) / len(sigma)


def transition(sigma, cache):
    """``Phi_sigma = Atilde(T_l) ... Atilde(T_1)``; the newest interval multiplies on the left."""
    phi = None
    for T in sigma:
        if T not in cache:
            raise KeyError(f"interval {T} missing from discretization cache")
        step = cache.closed_loop(T)
        phi = step if phi is None else step @ phi
    return phi


@dataclass(frozen=True, eq=False)
class HorizonTable:
    """Transition matrices and statistics for every horizon of a space, by index.

    Built once per (space, plant); the online mechanisms scan it with
    vectorized quadratic-form tests.
    """

    space: HorizonSpace
    phis: np.ndarray       # (H, n, n)
    durations: np.ndarray  # (H,)
    lengths: np.ndarray    # (H,)

    @property
    def averages(self):
        return self.durations / self.lengths

    def __len__(self):
        return len(self.durations)

    def horizon(self, index):
        return self.space.horizon_at(index)

    def index(self, sigma):
        return self.space.index_of(sigma)


def build_table(space, cache):
    """Compute all ``Phi_sigma`` level by level from their length-(l-1) prefixes."""
    cache.build(space.gamma)
    steps = np.array([cache.closed_loop(T) for T in space.gamma])
    gamma = np.array(space.gamma)
    g, n = len(gamma), steps.shape[1]

    phis, durs, lens = [], [], []
    prev_phi = np.eye(n)[None]
    prev_dur = np.zeros(1)
    for length in range(1, space.l_max + 1):
        prev_phi = np.einsum("tij,pjk->ptik", steps, prev_phi).reshape(-1, n, n)
        prev_dur = (prev_dur[:, None] + gamma[None, :]).reshape(-1)
        if length >= space.l_min:
            phis.append(prev_phi)
            durs.append(prev_dur)
            lens.append(np.full(g ** length, length))
    return HorizonTable(space, np.concatenate(phis), np.concatenate(durs),
                        np.concatenate(lens).astype(float))
