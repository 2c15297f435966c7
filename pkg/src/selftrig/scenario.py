"""Scenario files: loading, validation and assembly of a ready-to-run setup.

A scenario is a YAML document with the blocks ``plant``, ``horizons``,
``mechanism``, ``certificate``, ``sim``, ``analysis`` and ``output``;
see the files shipped in ``selftrig/scenarios`` for complete examples.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import linalg
from .certificates import (
    PerturbedCertificate,
    StabilityCertificate,
    certify_unperturbed,
    find_perturbed_certificate,
    max_certified_varpi,
    verify_perturbed,
)
from .errors import InfeasibleError, ScenarioError
from .horizons import HorizonSpace, build_table, transition
from .partition import build_partition
from .plant import DiscretizationCache, PlantModel, fallback_norm, growth_constant, varpi_bound
from .sim import DEFAULT_SUBSTEP, DEFAULT_T_END, make_disturbance
from .trigger import (
    MODES,
    OFFLINE_PERTURBED,
    OFFLINE_UNPERTURBED,
    ONLINE_PERTURBED,
    ONLINE_UNPERTURBED,
    RegionPolicy,
    decide_offline,
    decide_online_perturbed,
    decide_online_unperturbed,
    precompute_offline_perturbed,
    precompute_offline_unperturbed,
)

TIE_BREAKS = ("deterministic", "seeded-random")


def builtin_names():
    files = resources.files("selftrig").joinpath("scenarios").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".yaml"))


def _read_source(source):
    path = Path(source)
    if path.suffix in (".yaml", ".yml") or path.exists():
        return path.read_text(), str(path)
    if source in builtin_names():
        ref = resources.files("selftrig").joinpath("scenarios").joinpath(f"{source}.yaml")
        return ref.read_text(), f"builtin:{source}"
    raise FileNotFoundError(f"no scenario file or built-in scenario named {source!r}")


@dataclass
class Scenario:
    name: str
    data: dict
    source: str = ""

    def block(self, key):
        return self.data.get(key) or {}

    @property
    def mode(self):
        return self.block("mechanism").get("mode")

    @property
    def perturbed(self):
        return self.mode in (ONLINE_PERTURBED, OFFLINE_PERTURBED)

    @property
    def offline(self):
        return self.mode in (OFFLINE_UNPERTURBED, OFFLINE_PERTURBED)

    def with_overrides(self, overrides):
        """Copy with dotted-key overrides, e.g. ``{"mechanism.beta": 0.1}``."""
        data = copy.deepcopy(self.data)
        for key, value in overrides.items():
            node = data
            *path, last = key.split(".")
            for p in path:
                node = node.setdefault(p, {})
            node[last] = value
        return validate(Scenario(self.name, data, self.source))


def load_scenario(source):
    """Load and validate a scenario from a path or a built-in name."""
    text, origin = _read_source(source)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{origin}: malformed YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioError(f"{origin}: top level must be a mapping")
    name = data.get("name") or Path(str(source)).stem
    return validate(Scenario(name, data, origin))


def _require(cond, msg):
    if not cond:
        raise ScenarioError(msg)


def validate(sc):
    plant = sc.block("plant")
    for key in ("A", "B", "K"):
        _require(key in plant, f"plant.{key} is required")
    try:
        A = linalg.as_matrix(plant["A"], "A")
        B = linalg.as_matrix(plant["B"], "B")
        K = linalg.as_matrix(plant["K"], "K")
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    n = A.shape[0]
    _require(A.shape == (n, n), f"plant.A must be square, got {A.shape}")
    _require(B.shape[0] == n, f"plant.B must have {n} rows, got {B.shape}")
    _require(K.shape == (B.shape[1], n), f"plant.K must be {B.shape[1]}x{n}, got {K.shape}")
    if "D" in plant:
        D = linalg.as_matrix(plant["D"], "D")
        _require(D.shape[0] == n, f"plant.D must have {n} rows")

    mode = sc.mode
    if mode is None:
        return sc
    _require(mode in MODES, f"mechanism.mode must be one of {MODES}, got {mode!r}")
    hz = sc.block("horizons")
    _require("gamma" in hz, "horizons.gamma is required")
    gamma = [float(T) for T in hz["gamma"]]
    _require(gamma == sorted(gamma) and len(set(gamma)) == len(gamma),
             "horizons.gamma must be strictly increasing")
    mech = sc.block("mechanism")
    _require(float(mech.get("beta", 0.0)) >= 0, "mechanism.beta must be >= 0")
    _require(mech.get("tie_break", "deterministic") in TIE_BREAKS,
             f"mechanism.tie_break must be one of {TIE_BREAKS}")
    if sc.perturbed:
        _require("D" in plant, "perturbed modes need plant.D")
    if mode == ONLINE_PERTURBED:
        _require("gamma" in mech, "online-perturbed needs mechanism.gamma")
    if mode == OFFLINE_PERTURBED:
        _require("gamma1" in mech and "gamma2" in mech,
                 "offline-perturbed needs mechanism.gamma1 and mechanism.gamma2")
    if sc.offline:
        _require(n == 2, "offline modes need a planar plant (n = 2)")
        _require(int(mech.get("N", 0)) >= 1, "offline modes need mechanism.N >= 1")
    x0 = sc.block("sim").get("x0")
    if x0 is not None:
        _require(len(x0) == n, f"sim.x0 must have {n} entries")
    cert = sc.block("certificate")
    for key in ("P", "M"):
        if cert.get(key) is not None:
            _require(np.shape(cert[key]) == (n, n), f"certificate.{key} must be {n}x{n}")
    return sc


def build_plant(sc):
    p = sc.block("plant")
    return PlantModel(p["A"], p["B"], p["K"], D=p.get("D"), w_max=float(p.get("w_max", 0.0)))


def build_space(sc):
    hz = sc.block("horizons")
    return HorizonSpace(tuple(hz["gamma"]), int(hz.get("l_min", 1)), int(hz.get("l_max", 1)))


# ---------------------------------------------------------------------------
# reference horizon selection
# ---------------------------------------------------------------------------

def _stack_min_eig(mats):
    return np.linalg.eigvalsh(0.5 * (mats + np.swapaxes(mats, 1, 2)))[:, 0]


def _pick_star(table, ok, score):
    """Shortest feasible length, then the largest score, then the lowest index."""
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return None
    L = table.lengths[idx].min()
    idx = idx[table.lengths[idx] == L]
    return table.horizon(int(idx[np.argmax(score[idx])]))


def auto_sigma_star(mode, table, beta, *, P=None, M=None, gamma=None):
    """Default reference horizon for ``mode``.

    Unperturbed (and perturbed without a supplied ``P``): horizons whose
    Stein equation is solvable, ranked by average interval. Perturbed
    with a supplied ``P``: horizons satisfying the decrease inequality
    of the certificate, ranked by its margin.
    """
    decay = np.exp(-beta * table.durations)
    phis = table.phis
    gamma = gamma or 0.0
    if P is None:
        shrink = decay - gamma
        sr = np.abs(np.linalg.eigvals(phis)).max(axis=1)
        return _pick_star(table, sr ** 2 < shrink, table.averages)
    if mode == ONLINE_PERTURBED:
        W = -np.einsum("hji,jk,hkl->hil", phis, P + M, phis) + (decay - gamma)[:, None, None] * P
        margin = _stack_min_eig(W)
        return _pick_star(table, margin >= 0, margin)
    # offline perturbed: reduced form with no disturbance, gamma = gamma1
    W = -np.einsum("hji,jk,hkl->hil", phis, P, phis) + (decay - gamma)[:, None, None] * P
    margin = _stack_min_eig(W)
    return _pick_star(table, margin >= 0, margin)


# ---------------------------------------------------------------------------
# assembled setup
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Setup:
    scenario: Scenario
    plant: PlantModel
    space: HorizonSpace
    cache: DiscretizationCache
    table: object
    cert: object
    partition: object = None
    policy: RegionPolicy | None = None
    rng: object = None
    notes: dict = None

    @property
    def mode(self):
        return self.scenario.mode

    def decide(self, x):
        mode = self.mode
        if mode == ONLINE_UNPERTURBED:
            return decide_online_unperturbed(x, self.cert, self.table, self.rng)
        if mode == ONLINE_PERTURBED:
            return decide_online_perturbed(x, self.cert, self.table, self.rng)
        if self.policy is None:
            raise ScenarioError("offline mode needs a region policy; run `selftrig partition` first")
        return decide_offline(x, self.policy, self.partition, self.cert, self.rng, self.space)

    def build_policy(self, threads=None):
        if self.mode == OFFLINE_UNPERTURBED:
            self.policy = precompute_offline_unperturbed(self.cert, self.table, self.partition, threads)
        else:
            self.policy = precompute_offline_perturbed(self.cert, self.table, self.partition, threads)
        return self.policy

    def attach_policy(self, policy):
        if policy.mode != self.mode or policy.N != self.partition.N:
            raise ScenarioError(
                f"policy (mode={policy.mode}, N={policy.N}) does not match scenario "
                f"(mode={self.mode}, N={self.partition.N})")
        self.policy = policy

    def disturbance(self):
        spec = self.scenario.block("plant").get("disturbance")
        if spec is None or self.plant.D is None:
            return None
        return make_disturbance(spec, self.plant.D.shape[1])


def _sigma_star_setting(sc):
    s = sc.block("certificate").get("sigma_star", "auto")
    return None if s in (None, "auto") else tuple(float(T) for T in s)


def build_certificate(sc, plant, space, cache, table, mu_variant=None):
    """Construct or verify the certificate the scenario asks for.

    Returns ``(cert, notes)``; ``notes`` records how ``sigma*`` and
    ``varpi`` were obtained.
    """
    mech = sc.block("mechanism")
    cblock = sc.block("certificate")
    beta = float(mech.get("beta", 0.0))
    mode = sc.mode
    P = None if cblock.get("P") is None else np.array(cblock["P"], dtype=float)
    M = None if cblock.get("M") is None else np.array(cblock["M"], dtype=float)
    star = _sigma_star_setting(sc)
    notes = {}

    if mode in (ONLINE_UNPERTURBED, OFFLINE_UNPERTURBED):
        if star is None:
            star = auto_sigma_star(mode, table, beta)
            if star is None:
                raise InfeasibleError(f"no horizon admits a certificate at beta={beta}; "
                                      "lower beta or change gamma", beta=beta)
        notes["sigma_star"] = list(star)
        phi = transition(star, cache)
        if P is None:
            return certify_unperturbed(phi, beta, star), notes
        cert = StabilityCertificate(P, beta, star)
        if not cert.verify(phi):
            raise InfeasibleError("supplied P fails the decrease inequality",
                                  margins=cert.check(phi))
        return cert, notes

    gamma_max = space.t_max
    C = growth_constant(plant, space.gamma)
    C_prime = fallback_norm(plant, gamma_max)
    derived = varpi_bound(plant, space.gamma)
    notes.update(C=C, C_prime=C_prime, varpi_derived=derived)
    mu_variant = mu_variant or mech.get("mu_variant", "published")
    online = mode == ONLINE_PERTURBED
    gammas = (dict(gamma=float(mech["gamma"])) if online
              else dict(gamma1=float(mech["gamma1"]), gamma2=float(mech["gamma2"])))
    probe = PerturbedCertificate(P=np.eye(plant.n) if P is None else P, sigma_star=(gamma_max,),
                                 beta=beta, varpi=0.0, C=C, C_prime=C_prime, T_max=gamma_max,
                                 M=M if online and M is not None else (np.eye(plant.n) if online else None),
                                 mu_variant=mu_variant, **gammas)
    if star is None:
        star = auto_sigma_star(mode, table, beta, P=P, M=M,
                               gamma=gammas.get("gamma", gammas.get("gamma1")))
        if star is None:
            raise InfeasibleError("no horizon satisfies the decrease inequality of the certificate",
                                  beta=beta, **gammas)
    notes["sigma_star"] = list(star)
    phi = transition(star, cache)

    setting = mech.get("varpi", "derived")
    if setting == "derived":
        varpi = derived
    elif setting == "certified":
        if P is None:
            cert0 = find_perturbed_certificate(phi, star, beta=beta, varpi=0.0, C=C,
                                               C_prime=C_prime, T_max=gamma_max,
                                               mu_variant=mu_variant, **gammas)
        else:
            cert0 = probe.with_(P=P, M=M, sigma_star=star)
        varpi = max_certified_varpi(cert0, phi)
        if not math.isfinite(varpi):
            varpi = derived
        if P is None:
            P, M = cert0.P, cert0.M
    else:
        varpi = float(setting)
    notes["varpi"] = varpi
    try:
        cert = find_perturbed_certificate(phi, star, beta=beta, varpi=varpi, C=C,
                                          C_prime=C_prime, T_max=gamma_max, P=P, M=M,
                                          mu_variant=mu_variant, **gammas)
    except InfeasibleError as exc:
        if P is not None:
            exc.details["max_certified_varpi"] = max_certified_varpi(
                probe.with_(P=P, M=M, sigma_star=star), phi)
        exc.details.update(notes)
        raise
    return cert, notes


def prepare(sc, *, policy=None, build_policy=True, mu_variant=None, seed=None, threads=None):
    """Assemble plant, horizon table, certificate and (offline) policy for ``sc``."""
    if sc.mode is None:
        raise ScenarioError(f"scenario {sc.name!r} has no mechanism block")
    plant = build_plant(sc)
    space = build_space(sc)
    cache = DiscretizationCache(plant)
    table = build_table(space, cache)
    cert, notes = build_certificate(sc, plant, space, cache, table, mu_variant)
    stable = [T for T in space.gamma if linalg.spectral_radius(cache.closed_loop(T)) < 1]
    notes["largest_stable_interval"] = max(stable) if stable else None
    mech = sc.block("mechanism")
    rng = None
    if mech.get("tie_break", "deterministic") == "seeded-random":
        rng = np.random.default_rng(mech.get("seed", 0) if seed is None else seed)
    setup = Setup(sc, plant, space, cache, table, cert, rng=rng, notes=notes)
    if sc.offline:
        setup.partition = build_partition(plant.n, int(mech["N"]), float(mech.get("overlap", 1e-6)))
        if policy is not None:
            setup.attach_policy(policy)
        elif build_policy:
            setup.build_policy(threads)
    return setup


def sim_settings(sc, substep=None):
    s = sc.block("sim")
    return {
        "x0": s.get("x0"),
        "t_end": float(s.get("t_end", DEFAULT_T_END)),
        "substep": float(substep if substep is not None else s.get("substep", DEFAULT_SUBSTEP)),
    }


def verify_certificate(setup):
    """``(passed, margins)`` for the setup's certificate at its ``sigma*``."""
    from .certificates import perturbed_margins

    phi = transition(setup.cert.sigma_star, setup.cache)
    if isinstance(setup.cert, StabilityCertificate):
        return setup.cert.verify(phi), setup.cert.check(phi)
    return verify_perturbed(setup.cert, phi), perturbed_margins(setup.cert, phi)
