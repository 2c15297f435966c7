"""Quadratic stability certificates for self-triggered sampling.

Unperturbed case: a matrix ``P`` and a reference horizon ``sigma*`` with
``Phi*^T P Phi* - exp(-beta T*) P < 0``.

Perturbed case, two flavours:

* online: ``P`` and ``M`` with
  ``-Phi*^T (P + M) Phi* + (exp(-beta T*) - gamma) P >= 0`` and
  ``[[M, P], [P, gamma/chi I - P]] >= 0``, ``chi = (varpi sum_q C^q)^2``;
* offline: ``P`` with the three-block matrix ``U >= 0`` built from
  ``gamma1``, ``gamma2`` and ``chi = varpi sum_q C^q``.

Margins returned by the checks are minimum eigenvalues: non-negative
means the inequality holds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DomainError, InfeasibleError, NumericError
from .horizons import duration

# "< 0" holds when max-eig <= -STRICT_TOL * scale; ">= 0" when min-eig >= -PSD_TOL * scale
STRICT_TOL = 1e-9
PSD_TOL = 1e-8

MU_VARIANTS = ("published", "corrected")


def _scale(*mats):
    return 1.0 + max(float(np.abs(m).max()) for m in mats)


def _as_sym(m, name):
    s = linalg.as_matrix(m, name)
    if s.shape[0] != s.shape[1]:
        raise DomainError(f"{name} must be square")
    if np.abs(s - s.T).max() > linalg.SYMMETRY_TOL * (1 + np.abs(s).max()):
        raise DomainError(f"{name} is not symmetric")
    return 0.5 * (s + s.T)


# ---------------------------------------------------------------------------
# unperturbed
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StabilityCertificate:
    P: np.ndarray
    beta: float
    sigma_star: tuple

    kind = "unperturbed"

    def __post_init__(self):
        object.__setattr__(self, "P", _as_sym(self.P, "P"))
        object.__setattr__(self, "sigma_star", tuple(float(T) for T in self.sigma_star))
        if self.beta < 0:
            raise DomainError(f"beta must be >= 0, got {self.beta}")

    @property
    def duration(self):
        return duration(self.sigma_star)

    @property
    def rho(self):
        return math.exp(-self.beta * self.duration)

    def lmi_matrix(self, phi_star):
        return phi_star.T @ self.P @ phi_star - self.rho * self.P

    def margin(self, phi_star):
        """Smallest eigenvalue of ``-(Phi^T P Phi - rho P)``; > 0 means strictly feasible."""
        return -linalg.max_eig(self.lmi_matrix(phi_star))

    def check(self, phi_star):
        return {
            "P_positive": linalg.min_eig(self.P),
            "decrease": self.margin(phi_star),
        }

    def verify(self, phi_star):
        scale = _scale(self.P)
        m = self.check(phi_star)
        return m["P_positive"] > 0 and m["decrease"] >= STRICT_TOL * scale


def certify_unperturbed(phi_star, beta, sigma_star):
    """Build ``P`` from the Stein equation ``Phi^T P Phi - rho P = -I``."""
    sigma_star = tuple(sigma_star)
    rho = math.exp(-beta * duration(sigma_star))
    sr = linalg.spectral_radius(phi_star)
    if sr ** 2 >= rho:
        raise InfeasibleError(
            f"no certificate for sigma*={sigma_star}, beta={beta}: "
            f"spectral_radius(Phi*)^2 = {sr ** 2:.6g} must be < exp(-beta*T*) = {rho:.6g}; "
            "choose another sigma* or a smaller beta",
            spectral_radius=sr, required=rho,
        )
    P = linalg.solve_stein(phi_star, rho, np.eye(phi_star.shape[0]))
    cert = StabilityCertificate(P, beta, sigma_star)
    if not cert.verify(phi_star):
        raise InfeasibleError(
            "Stein solution failed re-verification (ill-conditioned)",
            margin=cert.margin(phi_star), spectral_radius=sr, required=rho,
        )
    return cert


# ---------------------------------------------------------------------------
# perturbed
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PerturbedCertificate:
    """Certificate data for the perturbed mechanisms.

    ``M`` and ``gamma`` are set for the online flavour, ``gamma1`` and
    ``gamma2`` for the offline one.
    """

    P: np.ndarray
    sigma_star: tuple
    beta: float
    varpi: float
    C: float
    C_prime: float
    T_max: float
    M: np.ndarray | None = None
    gamma: float | None = None
    gamma1: float | None = None
    gamma2: float | None = None
    mu_variant: str = "published"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "P", _as_sym(self.P, "P"))
        object.__setattr__(self, "sigma_star", tuple(float(T) for T in self.sigma_star))
        if self.M is not None:
            object.__setattr__(self, "M", _as_sym(self.M, "M"))
            if self.gamma is None:
                raise DomainError("online certificate needs gamma")
        elif self.gamma1 is None or self.gamma2 is None:
            raise DomainError("offline certificate needs gamma1 and gamma2")
        if self.mu_variant not in MU_VARIANTS:
            raise DomainError(f"mu_variant must be one of {MU_VARIANTS}")
        if self.varpi < 0:
            raise DomainError("varpi must be >= 0")

    @property
    def variant(self):
        return "online" if self.M is not None else "offline"

    kind = property(lambda self: f"perturbed-{self.variant}")

    def with_(self, **changes):
        fields = dict(P=self.P, sigma_star=self.sigma_star, beta=self.beta,
                      varpi=self.varpi, C=self.C, C_prime=self.C_prime, T_max=self.T_max,
                      M=self.M, gamma=self.gamma, gamma1=self.gamma1, gamma2=self.gamma2,
                      mu_variant=self.mu_variant)
        fields.update(changes)
        return PerturbedCertificate(**fields)

    def disturbance_sum(self, length):
        """``varpi * sum_{q=0}^{length-1} C^q``, the bound on the horizon disturbance."""
        return self.varpi * sum(self.C ** q for q in range(int(length)))

    def chi_for(self, length):
        theta = self.disturbance_sum(length)
        return theta ** 2 if self.variant == "online" else theta

    @property
    def chi(self):
        return self.chi_for(len(self.sigma_star))

    @property
    def rho_star(self):
        return math.exp(-self.beta * duration(self.sigma_star))

    @property
    def lam(self):
        """``lambda_max(P M^-1 P + P)`` (online flavour), cached."""
        if "lam" not in self._cache:
            try:
                Minv = np.linalg.inv(self.M)
            except np.linalg.LinAlgError as exc:
                raise NumericError("M is singular") from exc
            self._cache["lam"] = linalg.max_eig(self.P @ Minv @ self.P + self.P)
        return self._cache["lam"]

    @property
    def mu(self):
        return ultimate_bound(self)

    @property
    def psi(self):
        return tangent_ball(self)


def build_U_sigma(phi, dur, length, cert):
    """Block-diagonal ``U_sigma`` of the online perturbed test ``(x;1)^T U (x;1) >= 0``."""
    n = phi.shape[0]
    P, M = cert.P, cert.M
    U = np.zeros((n + 1, n + 1))
    U[:n, :n] = -phi.T @ (P + M) @ phi + (math.exp(-cert.beta * dur) - cert.gamma) * P
    U[n, n] = -cert.chi_for(length) * cert.lam + cert.gamma
    return U


def build_U_offline(phi, dur, length, cert, Q=None, eps=0.0, sign=-1.0):
    """Three-block matrix of the offline perturbed test.

    ``sign`` multiplies the region term ``eps * Q`` in the (1,1) block.
    The default ``-1`` is the S-procedure direction that makes ``U >= 0``
    imply the decrease condition on the cone ``x^T Q x >= 0``; ``+1``
    reproduces the printed formula.
    """
    n = phi.shape[0]
    P = cert.P
    theta = cert.chi_for(length)
    if theta <= 0:
        raise DomainError("disturbance bound is zero; use offline_reduced_form")
    rho = math.exp(-cert.beta * dur)
    U = np.zeros((2 * n + 1, 2 * n + 1))
    U[:n, :n] = -phi.T @ P @ phi + (rho - cert.gamma1) * P
    if Q is not None and eps:
        U[:n, :n] += sign * eps * Q
    U[n:2 * n, :n] = -P @ phi
    U[:n, n:2 * n] = U[n:2 * n, :n].T
    U[n:2 * n, n:2 * n] = (cert.gamma2 / theta) * np.eye(n) - P
    U[2 * n, 2 * n] = cert.gamma1 - cert.gamma2
    return U


def offline_reduced_form(phi, dur, length, cert):
    """Schur complement of the disturbance block of :func:`build_U_offline`.

    Returns ``H`` with ``U >= 0  <=>  H >= 0`` (given ``gamma1 >= gamma2``),
    or ``None`` when the disturbance block ``gamma2/chi I - P`` is not
    positive definite, in which case no ``U`` is PSD.
    """
    P = cert.P
    rho = math.exp(-cert.beta * dur)
    G = -phi.T @ P @ phi + (rho - cert.gamma1) * P
    theta = cert.chi_for(length)
    if theta == 0:
        return G
    block = (cert.gamma2 / theta) * np.eye(P.shape[0]) - P
    if linalg.min_eig(block) <= 0:
        return None
    PPhi = P @ phi
    return G - PPhi.T @ np.linalg.solve(block, PPhi)


def perturbed_margins(cert, phi_star):
    """Minimum-eigenvalue margins of every inequality the certificate must satisfy."""
    L = len(cert.sigma_star)
    dur = duration(cert.sigma_star)
    out = {"P_positive": linalg.min_eig(cert.P)}
    if cert.variant == "online":
        P, M = cert.P, cert.M
        out["M_positive"] = linalg.min_eig(M)
        lmi1 = -phi_star.T @ (P + M) @ phi_star + (cert.rho_star - cert.gamma) * P
        out["lmi_decrease"] = linalg.min_eig(lmi1)
        chi = cert.chi
        if chi == 0:
            out["lmi_disturbance"] = out["M_positive"]
        else:
            n = P.shape[0]
            big = np.block([[M, P], [P, (cert.gamma / chi) * np.eye(n) - P]])
            out["lmi_disturbance"] = linalg.min_eig(big)
    else:
        out["gamma_order"] = cert.gamma1 - cert.gamma2
        if cert.chi == 0:
            H = offline_reduced_form(phi_star, dur, L, cert)
            out["lmi_U"] = min(linalg.min_eig(H), out["gamma_order"])
        else:
            out["lmi_U"] = linalg.min_eig(build_U_offline(phi_star, dur, L, cert))
    return out


def verify_perturbed(cert, phi_star, tol=None):
    """True iff every margin of :func:`perturbed_margins` passes.

    Positivity of ``P`` and ``M`` is tested strictly; the LMIs with
    tolerance ``tol`` (default ``PSD_TOL`` times the matrix scale).
    """
    margins = perturbed_margins(cert, phi_star)
    if tol is None:
        mats = [cert.P] + ([cert.M] if cert.M is not None else [])
        tol = PSD_TOL * _scale(*mats)
    ok = margins["P_positive"] > 0 and margins.get("M_positive", 1.0) > 0
    return ok and all(v >= -tol for k, v in margins.items() if not k.endswith("positive"))


def max_certified_varpi(cert, phi_star, tol=None, upper=None, iters=200):
    """Largest ``varpi`` for which :func:`verify_perturbed` still passes.

    The LMIs only tighten as ``varpi`` grows, so bisection applies.
    Returns 0.0 when even ``varpi = 0`` fails.
    """
    def ok(v):
        return verify_perturbed(cert.with_(varpi=v), phi_star, tol)

    if not ok(0.0):
        return 0.0
    hi = upper if upper is not None else max(cert.varpi, 1.0)
    while ok(hi):
        hi *= 2.0
        if hi > 1e12:
            return math.inf
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return lo


def find_perturbed_certificate(phi_star, sigma_star, *, beta, varpi, C, C_prime, T_max,
                               gamma=None, gamma1=None, gamma2=None, P=None, M=None,
                               mu_variant="published"):
    """Verify a supplied certificate or search for one on a scaling grid.

    With ``P`` given (and ``M`` for the online flavour) the data are only
    verified. Otherwise ``P0`` comes from the Stein equation for
    ``sigma*`` and the grid ``P = s P0`` (``s`` from 1e3 down to 1e-3),
    ``M = alpha I`` (``alpha`` from 1e-2 up to 1e3, online only) is
    scanned; the first passing pair wins.
    """
    common = dict(sigma_star=tuple(sigma_star), beta=beta, varpi=varpi, C=C,
                  C_prime=C_prime, T_max=T_max, gamma=gamma, gamma1=gamma1,
                  gamma2=gamma2, mu_variant=mu_variant)
    online = gamma is not None
    if P is not None:
        cert = PerturbedCertificate(P=P, M=M, **common)
        if not verify_perturbed(cert, phi_star):
            raise InfeasibleError("supplied certificate fails verification",
                                  margins=perturbed_margins(cert, phi_star))
        return cert

    rho = math.exp(-beta * duration(sigma_star))
    shrink = rho - (gamma if online else gamma1)
    n = phi_star.shape[0]
    try:
        P0 = linalg.solve_stein(phi_star, shrink, np.eye(n))
    except InfeasibleError:
        P0 = linalg.solve_stein(phi_star, rho, np.eye(n))

    best, best_margin = None, -math.inf
    scales = np.logspace(3, -3, 61)
    alphas = np.logspace(-2, 3, 51) if online else [None]
    for s in scales:
        for a in alphas:
            cert = PerturbedCertificate(P=s * P0, M=None if a is None else a * np.eye(n), **common)
            margins = perturbed_margins(cert, phi_star)
            worst = min(v for k, v in margins.items() if not k.endswith("positive"))
            if verify_perturbed(cert, phi_star):
                return cert
            if worst > best_margin:
                best, best_margin = cert, worst
    raise InfeasibleError(
        f"grid search found no certificate; best least eigenvalue {best_margin:.3e}. "
        "Supply an externally computed (P, M) or relax gamma.",
        best_margin=best_margin,
        best_P=None if best is None else best.P.tolist(),
    )


# ---------------------------------------------------------------------------
# ellipsoids
# ---------------------------------------------------------------------------

def ultimate_bound(cert):
    """Level ``mu`` of the ultimately invariant ellipsoid ``E(P, mu)``.

    ``published``: ``lambda_max(P) (C'/lambda_min(P) + varpi)^2``.
    ``corrected``: ``lambda_max(P) (C'/sqrt(lambda_min(P)) + varpi)^2``, which
    follows from ``||x|| <= 1/sqrt(lambda_min(P))`` on ``E(P, 1)``.
    """
    ev = np.linalg.eigvalsh(cert.P)
    lo, hi = float(ev[0]), float(ev[-1])
    denom = lo if cert.mu_variant == "published" else math.sqrt(lo)
    return hi * (cert.C_prime / denom + cert.varpi) ** 2


def tangent_ball(cert):
    """Smallest squared radius ``psi`` with ``E(P, mu)`` inside the ball ``||x||^2 <= psi``."""
    return ultimate_bound(cert) / linalg.min_eig(cert.P)


def in_ellipsoid(P, level, x):
    x = np.asarray(x, dtype=float)
    return float(x @ P @ x) <= level + 1e-12 * max(1.0, level)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _mat(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def certificate_to_dict(cert):
    d = {"kind": cert.kind, "P": _mat(cert.P), "beta": cert.beta,
         "sigma_star": list(cert.sigma_star)}
    if isinstance(cert, StabilityCertificate):
        d["rho"] = cert.rho
        return d
    d.update(varpi=cert.varpi, C=cert.C, C_prime=cert.C_prime, T_max=cert.T_max,
             mu_variant=cert.mu_variant, chi=cert.chi, mu=cert.mu, psi=cert.psi)
    if cert.variant == "online":
        d.update(M=_mat(cert.M), gamma=cert.gamma)
    else:
        d.update(gamma1=cert.gamma1, gamma2=cert.gamma2)
    return d


def certificate_from_dict(d):
    kind = d["kind"]
    if kind == "unperturbed":
        return StabilityCertificate(np.array(d["P"]), d["beta"], tuple(d["sigma_star"]))
    if kind not in ("perturbed-online", "perturbed-offline"):
        raise DomainError(f"unknown certificate kind {kind!r}")
    return PerturbedCertificate(
        P=np.array(d["P"]), sigma_star=tuple(d["sigma_star"]), beta=d["beta"],
        varpi=d["varpi"], C=d["C"], C_prime=d["C_prime"], T_max=d["T_max"],
        M=None if d.get("M") is None else np.array(d["M"]),
        gamma=d.get("gamma"), gamma1=d.get("gamma1"), gamma2=d.get("gamma2"),
        mu_variant=d.get("mu_variant", "published"),
    )
