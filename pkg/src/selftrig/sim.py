"""Closed-loop simulation of the sampled-data loop under a triggering mechanism."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .certificates import ultimate_bound
from .errors import DivergenceError, DomainError
from .horizons import duration
from .plant import DiscretizationCache, discretize

LYAP_REL_TOL = 1e-9
GUUB_REL_TOL = 1e-6
DEFAULT_SUBSTEP = 1e-3
DEFAULT_T_END = 40.0


# ---------------------------------------------------------------------------
# disturbances
# ---------------------------------------------------------------------------

_EXPR_NAMESPACE = {k: getattr(np, k) for k in
                   ("sin", "cos", "tan", "exp", "sqrt", "abs", "sign", "tanh", "pi", "clip")}


def make_disturbance(spec, dim=1):
    """Build ``w(t)`` from a spec dict.

    Kinds: ``sine`` (``amplitude * sin(omega t + phase)``), ``constant``
    (``value``), ``noise`` (uniform in ``[-amplitude, amplitude]``, held
    on a ``hold``-second grid, seeded) and ``expr`` (a numpy expression
    in ``t``).
    """
    if spec is None:
        return None
    kind = spec.get("kind", "sine")
    if kind == "sine":
        a = float(spec.get("amplitude", 1.0))
        omega = float(spec.get("omega", 1.0))
        phase = float(spec.get("phase", 0.0))
        return lambda t: np.full(dim, a * math.sin(omega * t + phase))
    if kind == "constant":
        value = np.broadcast_to(np.asarray(spec.get("value", 0.0), dtype=float), (dim,)).copy()
        return lambda t: value
    if kind == "noise":
        amp = float(spec.get("amplitude", 1.0))
        hold = float(spec.get("hold", DEFAULT_SUBSTEP))
        rng = np.random.default_rng(spec.get("seed", 0))
        draws = {}

        def w(t):
            k = int(math.floor(t / hold + 1e-9))
            while len(draws) <= k:
                draws[len(draws)] = rng.uniform(-amp, amp, size=dim)
            return draws[k]
        return w
    if kind == "expr":
        code = compile(str(spec["expr"]), "<disturbance>", "eval")

        def w(t):
            return np.broadcast_to(
                np.asarray(eval(code, {"__builtins__": {}}, dict(_EXPR_NAMESPACE, t=t)),
                           dtype=float), (dim,)).copy()
        return w
    raise DomainError(f"unknown disturbance kind {kind!r}")


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SimulationTrace:
    """Everything recorded during one run.

    ``sample_times``/``states`` hold every sampling instant ``t_h``;
    ``decision_rows`` points at the rows that are decision instants
    ``tau_k``. ``horizon_of_row[h]`` is the decision that produced the
    interval ending at row ``h`` (``-1`` for the initial row).
    """

    mode: str
    P: np.ndarray | None
    sample_times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    decision_rows: list = field(default_factory=list)
    horizons: list = field(default_factory=list)
    horizon_ids: list = field(default_factory=list)
    decision_modes: list = field(default_factory=list)
    horizon_of_row: list = field(default_factory=list)
    dense_t: list = field(default_factory=list)
    dense_x: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    @property
    def times(self):
        return np.asarray(self.sample_times)

    @property
    def X(self):
        return np.asarray(self.states)

    @property
    def lyapunov(self):
        if self.P is None:
            return None
        X = self.X
        return np.einsum("hi,ij,hj->h", X, self.P, X)

    @property
    def intervals(self):
        return np.diff(self.times)

    @property
    def decision_times(self):
        return self.times[self.decision_rows]

    @property
    def decision_states(self):
        return self.X[self.decision_rows]

    @property
    def average_interval(self):
        """``(t_last - t_0) / number of intervals``."""
        n = len(self.sample_times) - 1
        return (self.sample_times[-1] - self.sample_times[0]) / n if n else math.nan

    @property
    def average_horizon_duration(self):
        """Mean total duration of the committed horizons."""
        return float(np.mean([duration(s) for s in self.horizons])) if self.horizons else math.nan

    def summary(self):
        return {
            "mode": self.mode,
            "average_interval": self.average_interval,
            "average_horizon_duration": self.average_horizon_duration,
            "decisions": len(self.horizons),
            "intervals": len(self.sample_times) - 1,
            "t_end": self.sample_times[-1],
            "fallback_decisions": sum(m == "fallback-Tmax" for m in self.decision_modes),
            "max_decision_wall_time": max(self.wall_times) if self.wall_times else 0.0,
            "final_state": list(map(float, self.states[-1])),
        }


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

def _rk4_interval(plant, x, u, t0, T, w, substep):
    n_sub = max(1, math.ceil(T / substep - 1e-9))
    h = T / n_sub
    Bu = plant.B @ u
    D = plant.D

    def f(t, y):
        dy = plant.A @ y + Bu
        if w is not None:
            dy = dy + D @ w(t)
        return dy

    ts, xs = [], []
    t = t0
    for i in range(n_sub):
        k1 = f(t, x)
        k2 = f(t + h / 2, x + h / 2 * k1)
        k3 = f(t + h / 2, x + h / 2 * k2)
        k4 = f(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t0 + (i + 1) * h
        ts.append(t)
        xs.append(x)
    return x, ts, xs


class _ExactDense:
    """Exact ZOH sub-steps for plotting the unperturbed trajectory."""

    def __init__(self, plant, substep):
        self.plant = plant
        self.substep = substep
        self._steps = {}

    def interval(self, x, T, t0):
        n_sub = max(1, math.ceil(T / self.substep - 1e-9))
        h = T / n_sub
        if h not in self._steps:
            self._steps[h] = discretize(self.plant, h)[:2]
        A_h, B_h = self._steps[h]
        u = self.plant.K @ x
        ts, xs = [], []
        for i in range(n_sub):
            x = A_h @ x + B_h @ u
            ts.append(t0 + (i + 1) * h)
            xs.append(x)
        return ts, xs


def simulate(plant, decide, x0, *, t_end=DEFAULT_T_END, perturbed=False, disturbance=None,
             substep=DEFAULT_SUBSTEP, P=None, mode="", cache=None, dense=True,
             max_decisions=100000):
    """Run ``decide -> apply horizon`` until the horizon in progress ends past ``t_end``.

    ``decide(x)`` returns a :class:`~selftrig.trigger.TriggerDecision`.
    Unperturbed runs step exactly with ``Atilde_T``; perturbed runs
    integrate with RK4 (held ``u = K x(t_h)`` and ``w(t)``).
    """
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (plant.n,):
        raise DomainError(f"x0 must have {plant.n} entries")
    if perturbed and plant.D is None and disturbance is not None:
        raise DomainError("disturbance given but plant has no D")
    cache = cache or DiscretizationCache(plant)
    dense_exact = _ExactDense(plant, substep) if dense and not perturbed else None

    trace = SimulationTrace(mode=mode, P=P)
    t = 0.0
    trace.sample_times.append(t)
    trace.states.append(x.copy())
    trace.horizon_of_row.append(-1)
    trace.dense_t.append(t)
    trace.dense_x.append(x.copy())

    while t < t_end - 1e-12 and len(trace.horizons) < max_decisions:
        start = time.perf_counter()
        decision = decide(x)
        trace.wall_times.append(time.perf_counter() - start)
        k = len(trace.horizons)
        trace.decision_rows.append(len(trace.sample_times) - 1)
        trace.horizons.append(tuple(decision.horizon))
        trace.horizon_ids.append(int(decision.index))
        trace.decision_modes.append(decision.mode)
        for T in decision.horizon:
            if perturbed:
                x_new, ts, xs = _rk4_interval(plant, x, plant.K @ x, t, T, disturbance, substep)
            else:
                x_new = cache.closed_loop(T) @ x
                ts, xs = dense_exact.interval(x, T, t) if dense_exact else ([], [])
            t = t + T
            if not np.all(np.isfinite(x_new)):
                raise DivergenceError(f"non-finite state at t={t:.6g}", trace)
            x = x_new
            trace.sample_times.append(t)
            trace.states.append(x.copy())
            trace.horizon_of_row.append(k)
            if dense:
                trace.dense_t.extend(ts)
                trace.dense_x.extend(xs)
    return trace


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

@dataclass
class TraceReport:
    kind: str
    steps: list
    entry_row: int | None = None

    @property
    def violations(self):
        return [s for s in self.steps if not s["ok"]]

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        return {"kind": self.kind, "passed": self.passed, "checked": len(self.steps),
                "violations": self.violations, "entry_row": self.entry_row}


def verify_trace(trace, cert, mode=None, states=None):
    """Check the trajectory-level guarantee of the certificate.

    Unperturbed: ``V(x_{k+1}) <= exp(-beta dT) V(x_k) (1 + 1e-9)`` at every
    pair of consecutive decision instants. Perturbed: after the first
    sample inside ``E(P, mu)``, every later sample lies in
    ``E(P, mu (1 + 1e-6))``.
    """
    mode = mode or trace.mode
    X = trace.X if states is None else np.asarray(states, dtype=float)
    P = cert.P
    V = np.einsum("hi,ij,hj->h", X, P, X)
    rows = list(trace.decision_rows) + [len(X) - 1]
    times = trace.times
    if "unperturbed" in mode:
        steps = []
        for k in range(len(rows) - 1):
            a, b = rows[k], rows[k + 1]
            bound = math.exp(-cert.beta * (times[b] - times[a])) * V[a] * (1 + LYAP_REL_TOL)
            steps.append({"k": k, "row": b, "V": float(V[b]), "bound": float(bound),
                          "ok": bool(V[b] <= bound)})
        return TraceReport("lyapunov", steps)
    mu = ultimate_bound(cert)
    inside = np.flatnonzero(V <= mu)
    if len(inside) == 0:
        return TraceReport("guub", [], None)
    entry = int(inside[0])
    limit = mu * (1 + GUUB_REL_TOL)
    steps = [{"row": h, "t": float(times[h]), "V": float(V[h]), "bound": float(limit),
              "ok": bool(V[h] <= limit)} for h in range(entry, len(V))]
    return TraceReport("guub", steps, entry)


def check_exact_propagation(trace, cache):
    """Largest relative gap between recorded decision states and ``Phi_sigma x_k``."""
    from .horizons import transition

    X = trace.X
    rows = list(trace.decision_rows) + [len(X) - 1]
    worst = 0.0
    for k, sigma in enumerate(trace.horizons):
        a, b = rows[k], rows[k + 1]
        pred = transition(sigma, cache) @ X[a]
        scale = max(np.linalg.norm(pred), 1e-300)
        worst = max(worst, float(np.linalg.norm(pred - X[b]) / scale))
    return worst


def motivational_report(plant, T_list, pairs):
    """Spectral radius sweep plus Schur verdicts of interval pairs and their products.

    Each pair ``(T1, T2)`` is applied chronologically: ``T1`` first, so the
    product is ``Atilde_T2 Atilde_T1``.
    """
    cache = DiscretizationCache(plant)
    sweep = [(float(T), linalg.spectral_radius(cache.closed_loop(T))) for T in T_list]
    cases = []
    for T1, T2 in pairs:
        r1 = linalg.spectral_radius(cache.closed_loop(T1))
        r2 = linalg.spectral_radius(cache.closed_loop(T2))
        rp = linalg.spectral_radius(cache.closed_loop(T2) @ cache.closed_loop(T1))
        cases.append({"pair": [float(T1), float(T2)], "rho_first": r1, "rho_second": r2,
                      "rho_product": rp, "first_stable": r1 < 1, "second_stable": r2 < 1,
                      "product_stable": rp < 1})
    stable = [T for T, r in sweep if r < 1]
    return {"sweep": sweep, "cases": cases,
            "largest_stable_period": max(stable) if stable else None}


def run(scenario, *, setup=None, substep=None, dense=True, **prepare_kwargs):
    """Simulate a scenario (object, path or built-in name) from ``sim.x0``.

    Pass a prepared ``setup`` to reuse its horizon table, certificate and
    policy; otherwise one is built with ``prepare_kwargs``.
    """
    from .scenario import Scenario, load_scenario, prepare, sim_settings

    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    if setup is None:
        setup = prepare(scenario, **prepare_kwargs)
    s = sim_settings(scenario, substep)
    if s["x0"] is None:
        raise DomainError(f"scenario {scenario.name!r} has no sim.x0")
    return simulate(setup.plant, setup.decide, s["x0"], t_end=s["t_end"],
                    perturbed=scenario.perturbed, disturbance=setup.disturbance(),
                    substep=s["substep"], P=setup.cert.P, mode=scenario.mode,
                    cache=setup.cache, dense=dense)


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def trace_columns(n):
    return ["t"] + [f"x{i + 1}" for i in range(n)] + ["V", "horizon_k", "horizon_id", "interval"]


def write_trace_csv(trace, path):
    """One row per sampling instant; ``horizon_k`` is the decision that produced the row."""
    import csv

    X = trace.X
    V = trace.lyapunov if trace.P is not None else np.full(len(X), math.nan)
    times = trace.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_columns(X.shape[1]))
        for h in range(len(X)):
            k = trace.horizon_of_row[h]
            hid = trace.horizon_ids[k] if k >= 0 else -1
            dt = trace.horizons[k][h - trace.decision_rows[k] - 1] if k >= 0 else 0.0
            w.writerow([repr(float(times[h]))] + [repr(float(v)) for v in X[h]]
                       + [repr(float(V[h])), k, hid, repr(float(dt))])


def write_dense_csv(trace, path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(len(trace.states[0]))])
        for t, x in zip(trace.dense_t, trace.dense_x):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x])


def read_trace_csv(path, mode="", P=None):
    """Rebuild a :class:`SimulationTrace` (without dense data) from :func:`write_trace_csv` output."""
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DomainError(f"{path}: empty trace")
    n = sum(1 for key in rows[0] if key.startswith("x") and key[1:].isdigit())
    trace = SimulationTrace(mode=mode, P=P)
    last_k = None
    for h, r in enumerate(rows):
        k = int(r["horizon_k"])
        trace.sample_times.append(float(r["t"]))
        trace.states.append(np.array([float(r[f"x{i + 1}"]) for i in range(n)]))
        trace.horizon_of_row.append(k)
        if k >= 0 and k != last_k:
            trace.decision_rows.append(h - 1)
            trace.horizons.append(())
            trace.horizon_ids.append(int(r["horizon_id"]))
            trace.decision_modes.append(mode)
        if k >= 0:
            trace.horizons[-1] = trace.horizons[-1] + (float(r["interval"]),)
        last_k = k
    return trace
