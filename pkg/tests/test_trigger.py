import json

import numpy as np
import pytest

from conftest import SIM_PLANT
from oracles import BruteForce
from selftrig.certificates import certify_unperturbed
from selftrig.horizons import HorizonSpace, build_table, transition
from selftrig.partition import build_partition, region_of
from selftrig.plant import DiscretizationCache, PlantModel
from selftrig.trigger import (
    FALLBACK,
    OFFLINE_PERTURBED,
    OFFLINE_UNPERTURBED,
    ONLINE_UNPERTURBED,
    RegionPolicy,
    decide_offline,
    decide_online_perturbed,
    decide_online_unperturbed,
    perturbed_online_values,
    pointwise_margin,
    precompute_offline_unperturbed,
    unperturbed_values,
)


@pytest.fixture(scope="module")
def small():
    plant = PlantModel(**SIM_PLANT)
    space = HorizonSpace((0.2, 0.3, 0.4, 0.5, 0.6, 0.7), 1, 3)
    cache = DiscretizationCache(plant)
    table = build_table(space, cache)
    cert = certify_unperturbed(transition((0.5,), cache), 0.0, (0.5,))
    return plant, space, cache, table, cert


def test_zero_state_picks_longest_constant(small):
    *_, table, cert = small
    d = decide_online_unperturbed(np.zeros(2), cert, table)
    assert d.horizon == (0.7,) and d.mode == ONLINE_UNPERTURBED
    assert d.feasible_count == len(table)
    assert d.tie_count == 3  # (0.7,), (0.7, 0.7), (0.7, 0.7, 0.7)


def test_degenerate_space():
    plant = PlantModel(**SIM_PLANT)
    space = HorizonSpace((0.5,), 1, 1)
    cache = DiscretizationCache(plant)
    table = build_table(space, cache)
    cert = certify_unperturbed(transition((0.5,), cache), 0.0, (0.5,))
    for x in ([1.0, 2.0], [-3.0, 0.1]):
        assert decide_online_unperturbed(np.array(x), cert, table).horizon == (0.5,)


def test_online_matches_brute_force(small, rng):
    plant, space, cache, table, cert = small
    oracle = BruteForce(**SIM_PLANT, gamma=space.gamma, l_min=1, l_max=3)
    for x in rng.normal(size=(30, 2)) * 5:
        d = decide_online_unperturbed(x, cert, table)
        ref, nfeas = oracle.unperturbed(x, cert.P, 0.0, (0.5,))
        assert d.horizon == ref
        assert d.feasible_count == nfeas


def test_sigma_star_always_feasible(small, rng):
    *_, table, cert = small
    star = table.index((0.5,))
    for x in rng.normal(size=(50, 2)):
        assert unperturbed_values(x, cert, table)[star] < 0


def test_scale_invariance_unperturbed(small, rng):
    *_, table, cert = small
    for x in rng.normal(size=(20, 2)):
        assert decide_online_unperturbed(x, cert, table) == decide_online_unperturbed(7.5 * x, cert, table)


def test_seeded_random_tie_break_is_reproducible(small):
    *_, table, cert = small
    a = [decide_online_unperturbed(np.zeros(2), cert, table, np.random.default_rng(5)).horizon
         for _ in range(3)]
    b = [decide_online_unperturbed(np.zeros(2), cert, table, np.random.default_rng(5)).horizon
         for _ in range(3)]
    assert a == b
    picks = {decide_online_unperturbed(np.zeros(2), cert, table, np.random.default_rng(s)).horizon
             for s in range(20)}
    assert picks <= {(0.7,), (0.7, 0.7), (0.7, 0.7, 0.7)} and len(picks) > 1


def test_offline_single_region_subset_of_global(small, rng):
    plant, space, cache, table, cert = small
    part = build_partition(2, 1)
    policy = precompute_offline_unperturbed(cert, table, part)
    entry = policy.entries[0]
    for i in entry.indices:
        W = table.phis[i].T @ cert.P @ table.phis[i] - cert.P
        assert np.linalg.eigvalsh(W).max() <= 1e-8
    for x in rng.normal(size=(20, 2)):
        d = decide_offline(x, policy, part, cert)
        assert d.horizon in entry.horizons


def test_offline_policy_invariants_and_soundness(small, rng):
    plant, space, cache, table, cert = small
    part = build_partition(2, 20)
    policy = precompute_offline_unperturbed(cert, table, part)
    assert len(policy.entries) == 20
    for e in policy.entries:
        assert len({round(table.averages[i], 12) for i in e.indices}) == 1
        assert all(eps > 0 for eps in e.eps)
    for c in range(20):
        a = rng.uniform(part.axes[c] - part.half_angle, part.axes[c] + part.half_angle, 100)
        for x in np.stack([np.cos(a), np.sin(a)], axis=1) * rng.uniform(0.1, 10, (100, 1)):
            if region_of(part, x) != c:
                continue
            d = decide_offline(x, policy, part, cert)
            assert pointwise_margin(x, d.horizon, cert, cache, OFFLINE_UNPERTURBED) >= -1e-8
            assert d == decide_offline(2 * x, policy, part, cert)


def test_policy_json_round_trip(small):
    *_, table, cert = small
    policy = precompute_offline_unperturbed(cert, table, build_partition(2, 8))
    back = RegionPolicy.from_dict(json.loads(json.dumps(policy.to_dict())))
    assert back.entries == policy.entries and back.N == 8


def test_policy_threads_agree(small):
    *_, table, cert = small
    part = build_partition(2, 12)
    one = precompute_offline_unperturbed(cert, table, part, threads=1)
    four = precompute_offline_unperturbed(cert, table, part, threads=4)
    assert one.entries == four.entries


# --- perturbed -------------------------------------------------------------

def test_online_perturbed_fallback_inside_unit_ellipsoid(lab):
    s = lab.setup("online-perturbed-beta0")
    d = decide_online_perturbed(np.zeros(2), s.cert, s.table)
    assert d.mode == FALLBACK and d.horizon == (0.7,)


def test_online_perturbed_zero_disturbance_matches_unperturbed_feasibility(lab, rng):
    s = lab.setup("online-perturbed-beta0")
    cert0 = s.cert.with_(varpi=0.0, gamma=1e-12)
    xs = rng.normal(size=(100, 2))
    xs = xs / np.linalg.norm(xs, axis=1, keepdims=True) * 1e4
    for x in xs:
        pert = perturbed_online_values(x, cert0, s.table) >= 0
        # with varpi = 0 the test reads x^T(-Phi^T (P+M) Phi + rho P)x >= 0, i.e. the
        # unperturbed decrease test for P + M against P
        unp = (-np.einsum("hi,ij,hj->h", s.table.phis @ x, s.cert.P + s.cert.M, s.table.phis @ x)
               + np.exp(-cert0.beta * s.table.durations) * (x @ s.cert.P @ x)) >= 0
        assert np.array_equal(pert, unp)
        # and with the real gamma the perturbed set is contained in the unperturbed set for P
        strict = perturbed_online_values(x, s.cert.with_(varpi=0.0), s.table) >= 0
        plain = unperturbed_values(x, s.cert.with_(varpi=0.0), s.table) <= 0
        assert not np.any(strict & ~plain)


def test_perturbed_decisions_not_scale_invariant(lab):
    s = lab.setup("online-perturbed-beta0")
    d = s.cert.P
    found = False
    for r in (1.5, 3, 10, 100):
        for a in np.linspace(0, np.pi, 13):
            x = np.array([np.cos(a), np.sin(a)])
            x = x / np.sqrt(x @ d @ x) * r
            if decide_online_perturbed(x, s.cert, s.table).horizon != \
                    decide_online_perturbed(4 * x, s.cert, s.table).horizon:
                found = True
                break
        if found:
            break
    assert found


def test_online_perturbed_matches_brute_force(lab, rng):
    s = lab.setup("online-perturbed-beta0")
    c = s.cert
    oracle = BruteForce(**SIM_PLANT, gamma=s.space.gamma, l_min=1, l_max=3)
    small_space = HorizonSpace(s.space.gamma, 1, 3)
    table = build_table(small_space, s.cache)
    cert = c.with_(sigma_star=(0.7, 0.5, 0.5))
    for x in rng.normal(size=(20, 2)) * 4:
        d = decide_online_perturbed(x, cert, table)
        ref, _ = oracle.perturbed(x, c.P, c.M, c.beta, c.gamma, c.varpi, c.C, cert.sigma_star)
        assert d.horizon == ref


def test_offline_perturbed_fallback(lab):
    s = lab.setup("offline-perturbed-beta0")
    d = decide_offline(np.array([0.1, 0.1]), s.policy, s.partition, s.cert, space=s.space)
    assert d.mode == FALLBACK and d.horizon == (0.7,)
    x = np.array([5.0, -3.0])
    assert decide_offline(x, s.policy, s.partition, s.cert, space=s.space).mode == OFFLINE_PERTURBED
