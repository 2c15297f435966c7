import math
import warnings

import numpy as np
import pytest

from conftest import MOTIVATIONAL, SIM_PLANT
from oracles import rk4_reference
from selftrig.errors import DivergenceError, DomainError
from selftrig.plant import PlantModel
from selftrig.sim import (
    check_exact_propagation,
    make_disturbance,
    motivational_report,
    read_trace_csv,
    simulate,
    verify_trace,
    write_trace_csv,
)
from selftrig.trigger import TriggerDecision


def replay(horizons):
    it = iter(horizons)

    def decide(x):
        return TriggerDecision(next(it), -1, 1, 1, "replay")
    return decide


def test_zero_state_stays_zero(lab):
    s = lab.setup("online-unperturbed-beta0")
    tr = simulate(s.plant, s.decide, [0, 0],
                  t_end=10, P=s.cert.P, cache=s.cache, mode=s.mode)
    assert np.all(tr.X == 0) and np.all(tr.lyapunov == 0)


def test_exact_propagation(lab):
    s = lab.setup("online-unperturbed-beta0")
    tr = lab.trace("online-unperturbed-beta0")
    assert check_exact_propagation(tr, s.cache) <= 1e-10


def test_bookkeeping(lab):
    for name in ("online-unperturbed-beta0", "online-perturbed-beta0"):
        tr = lab.trace(name)
        assert np.all(np.diff(tr.times) > 0)
        assert tr.average_interval == (tr.times[-1] - tr.times[0]) / (len(tr.times) - 1)
        rows = tr.decision_rows + [len(tr.times) - 1]
        for k, sigma in enumerate(tr.horizons):
            assert tr.times[rows[k + 1]] - tr.times[rows[k]] == pytest.approx(sum(sigma), abs=1e-12)
        assert tr.times[-1] >= 40.0 - 1e-9


def test_clean_trace_verifies_and_beta0_is_monotone(lab):
    s = lab.setup("online-unperturbed-beta0")
    tr = lab.trace("online-unperturbed-beta0")
    assert verify_trace(tr, s.cert).passed
    V = tr.lyapunov[tr.decision_rows + [len(tr.X) - 1]]
    assert np.all(np.diff(V) <= 1e-9 * V[:-1])


def test_corrupted_trace_flagged(lab):
    s = lab.setup("online-unperturbed-beta01")
    tr = lab.trace("online-unperturbed-beta01")
    X = tr.X.copy()
    X[tr.decision_rows[3]] *= 10
    rep = verify_trace(tr, s.cert, states=X)
    assert not rep.passed and len(rep.violations) >= 1


def test_guub_corruption_flagged(lab):
    s = lab.setup("online-perturbed-beta0")
    tr = lab.trace("online-perturbed-beta0")
    rep = verify_trace(tr, s.cert)
    assert rep.passed and rep.entry_row is not None
    X = tr.X.copy()
    X[-1] = X[-1] / np.sqrt(X[-1] @ s.cert.P @ X[-1]) * np.sqrt(2 * s.cert.mu)
    assert not verify_trace(tr, s.cert, states=X).passed


def test_rk4_substep_convergence(lab):
    for name in ("online-perturbed-beta0", "offline-perturbed-beta0"):
        s = lab.setup(name)
        tr = lab.trace(name)
        w = s.disturbance()
        kw = dict(t_end=40.0, perturbed=True, disturbance=w, P=s.cert.P, dense=False)
        a = simulate(s.plant, replay(tr.horizons), tr.X[0], substep=1e-3, **kw)
        b = simulate(s.plant, replay(tr.horizons), tr.X[0], substep=5e-4, **kw)
        rel = np.linalg.norm(a.X[-1] - b.X[-1]) / np.linalg.norm(b.X[-1])
        assert rel < 1e-6


def test_rk4_interval_matches_reference():
    plant = PlantModel(**SIM_PLANT, D=[[1], [1]], w_max=1.0)
    w = make_disturbance({"kind": "sine", "omega": 5 * math.pi})
    x0 = np.array([1.0, -2.0])
    tr = simulate(plant, replay([(0.3, 0.4)]), x0, t_end=0.1, perturbed=True, disturbance=w,
                  dense=False)
    u0 = plant.K @ x0
    x1 = rk4_reference(lambda t, x: plant.A @ x + plant.B @ u0 + plant.D @ w(t), x0, 0, 0.3, 300)
    u1 = plant.K @ x1
    x2 = rk4_reference(lambda t, x: plant.A @ x + plant.B @ u1 + plant.D @ w(t), x1, 0.3, 0.7, 400)
    np.testing.assert_allclose(tr.X[-1], x2, rtol=1e-12)


def test_divergence_error():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plant = PlantModel([[50.0]], [[0.0]], [[0.0]])
        with pytest.raises(DivergenceError) as exc:
            simulate(plant, lambda x: TriggerDecision((100.0,), -1, 1, 1, "x"), [1.0], t_end=500)
    assert exc.value.trace is not None and len(exc.value.trace.states) >= 1


def test_disturbances():
    w = make_disturbance({"kind": "sine", "amplitude": 2.0, "omega": 5 * math.pi})
    assert w(0.1)[0] == pytest.approx(2 * math.sin(0.5 * math.pi))
    assert make_disturbance({"kind": "constant", "value": 0.3})(7.0)[0] == 0.3
    n1 = make_disturbance({"kind": "noise", "amplitude": 0.5, "seed": 3})
    n2 = make_disturbance({"kind": "noise", "amplitude": 0.5, "seed": 3})
    samples = [n1(t)[0] for t in np.linspace(0, 1, 50)]
    assert samples == [n2(t)[0] for t in np.linspace(0, 1, 50)]
    assert max(abs(v) for v in samples) <= 0.5
    e = make_disturbance({"kind": "expr", "expr": "sin(5*pi*t)"})
    assert e(0.1)[0] == pytest.approx(1.0)
    with pytest.raises(DomainError):
        make_disturbance({"kind": "square"})


def test_motivational_report_cases():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plant = PlantModel(**MOTIVATIONAL)
    rep = motivational_report(plant, np.linspace(0.1, 4, 40), [(1.5, 3.0), (2.126, 3.95), (2.126, 2.9)])
    verdicts = [(c["first_stable"], c["second_stable"], c["product_stable"]) for c in rep["cases"]]
    assert verdicts == [(True, True, False), (False, False, True), (False, True, True)]
    assert len(rep["sweep"]) == 40
    assert motivational_report(plant, [1.0], [])["cases"] == []


def test_csv_round_trip(lab, tmp_path):
    s = lab.setup("online-unperturbed-beta0")
    tr = lab.trace("online-unperturbed-beta0")
    write_trace_csv(tr, tmp_path / "t.csv")
    back = read_trace_csv(tmp_path / "t.csv", mode="unperturbed", P=s.cert.P)
    assert back.horizons == tr.horizons
    assert back.decision_rows == tr.decision_rows
    np.testing.assert_array_equal(back.X, tr.X)
    assert verify_trace(back, s.cert).passed
