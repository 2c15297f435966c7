"""Dense small-matrix numerics.

Everything here operates on plain ``numpy`` arrays. Matrices in this
package are tiny (n <= 6), so the routines favour robustness and
predictable error reporting over speed.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, InfeasibleError, NumericError

# Scale A until ||A||_1 <= this before evaluating the Taylor core.
EXPM_SCALING_THRESHOLD = 0.5
_EXPM_MAX_TERMS = 30

SYMMETRY_TOL = 1e-12


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float array."""
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DimensionError(f"{name} has non-finite entries")
    return m


def _square(a, name):
    m = as_matrix(a, name)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {m.shape}")
    return m


def symmetrize(s):
    """Return (S + S^T)/2 after checking that S is square."""
    m = _square(s, "symmetric matrix")
    return 0.5 * (m + m.T)


def expm(a):
    """Matrix exponential by scaling and squaring around a Taylor core.

    The argument is halved until its 1-norm is at most
    :data:`EXPM_SCALING_THRESHOLD`; the truncated series is then summed to
    machine precision and squared back up.
    """
    m = _square(a, "expm argument")
    n = m.shape[0]
    norm1 = np.abs(m).sum(axis=0).max()
    squarings = 0
    if norm1 > EXPM_SCALING_THRESHOLD:
        squarings = int(math.ceil(math.log2(norm1 / EXPM_SCALING_THRESHOLD)))
    b = m / 2.0 ** squarings

    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, _EXPM_MAX_TERMS + 1):
        term = term @ b / k
        result = result + term
        if np.abs(term).max() <= np.finfo(float).eps * np.abs(result).max():
            break
    for _ in range(squarings):
        result = result @ result
    return result


def eigenvalues(a):
    m = _square(a, "eigenvalue argument")
    try:
        return np.linalg.eigvals(m)
    except np.linalg.LinAlgError as exc:  # QR iteration did not converge
        raise NumericError(
            f"eigenvalue iteration failed for {m.shape} matrix "
            f"(max |entry| = {np.abs(m).max():.3e}): {exc}"
        ) from exc


def spectral_radius(a):
    """Largest eigenvalue modulus."""
    return float(np.abs(eigenvalues(a)).max())


def two_norm(a):
    """Largest singular value, as sqrt of the spectral radius of A^T A."""
    m = as_matrix(a)
    gram = m.T @ m
    return math.sqrt(max(float(np.linalg.eigvalsh(gram).max()), 0.0))


def min_eig(s):
    """Smallest eigenvalue of a symmetric matrix (symmetrized first)."""
    return float(np.linalg.eigvalsh(symmetrize(s))[0])


def max_eig(s):
    return float(np.linalg.eigvalsh(symmetrize(s))[-1])


def is_psd(s, tol=0.0):
    """True iff the smallest eigenvalue of ``s`` is >= -tol."""
    return min_eig(s) >= -tol


def kron(a, b):
    return np.kron(as_matrix(a, "kron left"), as_matrix(b, "kron right"))


def solve_stein(phi, rho, q):
    """Solve ``Phi^T P Phi - rho P = -Q`` for symmetric ``P``.

    Uses Kronecker vectorization, which is exact up to the conditioning of
    ``Phi^T (x) Phi^T - rho I``. Requires ``spectral_radius(Phi)**2 < rho``
    so that the solution is unique and positive definite for ``Q > 0``.
    """
    phi = _square(phi, "Phi")
    q = symmetrize(q)
    n = phi.shape[0]
    if q.shape != (n, n):
        raise DimensionError(f"Q has shape {q.shape}, expected {(n, n)}")
    if not rho > 0:
        raise InfeasibleError(f"rho must be positive, got {rho}", rho=rho)
    sr2 = spectral_radius(phi) ** 2
    if sr2 >= rho:
        raise InfeasibleError(
            f"Stein equation infeasible: spectral_radius(Phi)^2 = {sr2:.6g} "
            f">= rho = {rho:.6g}",
            rho=rho,
            spectral_radius_sq=sr2,
        )
    lhs = kron(phi.T, phi.T) - rho * np.eye(n * n)
    p = np.linalg.solve(lhs, -q.reshape(-1)).reshape(n, n)
    return 0.5 * (p + p.T)


def stein_residual(phi, rho, q, p):
    """Max-abs residual of ``Phi^T P Phi - rho P + Q``."""
    return float(np.abs(phi.T @ p @ phi - rho * p + q).max())
