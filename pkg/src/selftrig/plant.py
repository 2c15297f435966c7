"""Plant/controller model and exact zero-order-hold discretization."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from . import linalg
from .errors import DimensionError, DomainError


@dataclass(frozen=True, eq=False)
class PlantModel:
    """Continuous-time LTI plant ``x' = A x + B u + D w`` with ``u = K x(t_h)``.

    ``D`` and ``w_max`` describe an optional bounded disturbance channel;
    ``w_max`` bounds ``|w(t)|`` entrywise-in-norm (sup of ``||w(t)||_2``).
    """

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    D: np.ndarray | None = None
    w_max: float = 0.0

    def __post_init__(self):
        A = linalg.as_matrix(self.A, "A")
        B = linalg.as_matrix(self.B, "B")
        K = linalg.as_matrix(self.K, "K")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise DimensionError(f"B must have {n} rows, got {B.shape}")
        if K.shape != (B.shape[1], n):
            raise DimensionError(f"K must be {B.shape[1]}x{n}, got {K.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "K", K)
        if self.D is not None:
            D = linalg.as_matrix(self.D, "D")
            if D.shape[0] != n:
                raise DimensionError(f"D must have {n} rows, got {D.shape}")
            object.__setattr__(self, "D", D)
        if not (np.isfinite(self.w_max) and self.w_max >= 0):
            raise DomainError(f"w_max must be finite and >= 0, got {self.w_max}")

        closed = A + B @ K
        if np.real(linalg.eigenvalues(closed)).max() >= 0:
            warnings.warn("A + BK is not Hurwitz; only the sampled behaviour is analysed",
                          stacklevel=3)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]


def _check_interval(T):
    if not T > 0:
        raise DomainError(f"sampling interval must be positive, got {T}")


def discretize(plant, T):
    """Return ``(A_T, B_T, Atilde_T)`` for interval ``T``.

    ``A_T = e^{AT}`` and ``B_T = int_0^T e^{As} ds B`` are read off one
    augmented exponential ``exp([[A, B], [0, 0]] T)``.
    """
    _check_interval(T)
    n, m = plant.n, plant.m
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = plant.A
    aug[:n, n:] = plant.B
    E = linalg.expm(aug * T)
    A_T = E[:n, :n]
    B_T = E[:n, n:]
    return A_T, B_T, A_T + B_T @ plant.K


@dataclass(eq=False)
class DiscretizationCache:
    """Memoized ``T -> (A_T, B_T, Atilde_T)``.

    Fill it once (single-threaded) with :meth:`build`; afterwards it is
    only read.
    """

    plant: PlantModel
    _entries: dict = field(default_factory=dict, repr=False)

    def build(self, intervals):
        for T in intervals:
            self.get(T)
        return self

    def get(self, T):
        T = float(T)
        if T not in self._entries:
            self._entries[T] = discretize(self.plant, T)
        return self._entries[T]

    def closed_loop(self, T):
        return self.get(T)[2]

    def __contains__(self, T):
        return float(T) in self._entries

    def keys(self):
        return sorted(self._entries)


def growth_constant(plant, gamma):
    """``C = max_{T in gamma} ||Atilde_T||_2``."""
    gamma = list(gamma)
    if not gamma:
        raise DomainError("interval set is empty")
    return max(linalg.two_norm(discretize(plant, T)[2]) for T in gamma)


def fallback_norm(plant, T_max):
    """``C' = ||Atilde_{T_max}||_2``."""
    return linalg.two_norm(discretize(plant, T_max)[2])


def perturbation_bound(plant, T, intervals=200):
    """Upper bound ``w_max * int_0^T ||e^{As} D||_2 ds`` on one-step disturbance.

    Composite Simpson quadrature on ``intervals`` (even) sub-intervals.
    """
    if plant.D is None:
        raise DomainError("plant has no disturbance channel D")
    _check_interval(T)
    if intervals % 2:
        intervals += 1
    if not np.any(plant.D) or plant.w_max == 0:
        return 0.0
    s = np.linspace(0.0, T, intervals + 1)
    values = [linalg.two_norm(linalg.expm(plant.A * si) @ plant.D) for si in s]
    return float(plant.w_max * simpson(values, x=s))


def varpi_bound(plant, gamma, intervals=200):
    """``max_{T in gamma}`` of :func:`perturbation_bound`."""
    return max(perturbation_bound(plant, T, intervals) for T in gamma)
