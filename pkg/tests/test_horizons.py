import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MOTIVATIONAL, SIM_PLANT
from oracles import horizon_products
from selftrig import linalg
from selftrig.errors import DomainError
from selftrig.horizons import (
    HorizonSpace,
    average_interval,
    build_table,
    duration,
    transition,
)
from selftrig.plant import DiscretizationCache, PlantModel

GAMMA_51 = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.75)


def test_single_horizon_space():
    assert list(HorizonSpace((0.3,), 1, 1).enumerate()) == [(0.3,)]


def test_small_space_order():
    sp = HorizonSpace((1.0, 2.0), 1, 2)
    assert list(sp) == [(1.0,), (2.0,), (1.0, 1.0), (1.0, 2.0), (2.0, 1.0), (2.0, 2.0)]
    assert sp.count() == 6


def test_published_space_count():
    sp = HorizonSpace(GAMMA_51, 1, 6)
    assert sp.count() == 597870
    assert sum(1 for _ in sp.enumerate()) == 597870


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 3))
def test_count_formula(g, l_min, extra):
    sp = HorizonSpace(tuple(0.1 * (i + 1) for i in range(g)), l_min, l_min + extra)
    seq = list(sp.enumerate())
    assert len(seq) == sp.count() == sum(g ** l for l in range(l_min, l_min + extra + 1))
    assert len(set(seq)) == len(seq)
    assert seq == list(sp.enumerate())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.data())
def test_index_round_trip(g, l_max, data):
    sp = HorizonSpace(tuple(0.1 * (i + 1) for i in range(g)), 1, l_max)
    i = data.draw(st.integers(0, sp.count() - 1))
    sigma = sp.horizon_at(i)
    assert sp.index_of(sigma) == i
    assert list(sp.enumerate())[i] == sigma


def test_space_validation():
    with pytest.raises(DomainError):
        HorizonSpace((), 1, 1)
    with pytest.raises(DomainError):
        HorizonSpace((0.5, 0.2), 1, 1)
    with pytest.raises(DomainError):
        HorizonSpace((0.5,), 2, 1)
    with pytest.raises(DomainError):
        HorizonSpace((-0.5,), 1, 1)
    with pytest.raises(DomainError):
        HorizonSpace((0.5,), 1, 2).index_of((0.7,))


def test_average_and_duration():
    assert average_interval((1.5, 3.0)) == 2.25
    assert duration((1.5, 3.0)) == 4.5
    assert average_interval((0.7,)) == duration((0.7,)) == 0.7


@pytest.fixture(scope="module")
def motivational_cache():
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return DiscretizationCache(PlantModel(**MOTIVATIONAL)).build([1.5, 3.0, 2.126, 3.95])


def test_transition_single(motivational_cache):
    np.testing.assert_array_equal(transition((1.5,), motivational_cache),
                                  motivational_cache.closed_loop(1.5))


def test_transition_cases(motivational_cache):
    assert linalg.spectral_radius(transition((2.126, 3.95), motivational_cache)) < 1
    assert linalg.spectral_radius(transition((1.5, 3.0), motivational_cache)) > 1


def test_transition_missing_interval(motivational_cache):
    with pytest.raises(KeyError):
        transition((0.1,), motivational_cache)


def test_transition_concatenation(rng):
    cache = DiscretizationCache(PlantModel(**SIM_PLANT)).build(GAMMA_51)
    for _ in range(20):
        s1 = tuple(rng.choice(GAMMA_51, size=rng.integers(1, 4)))
        s2 = tuple(rng.choice(GAMMA_51, size=rng.integers(1, 4)))
        np.testing.assert_allclose(transition(s1 + s2, cache),
                                   transition(s2, cache) @ transition(s1, cache), rtol=1e-12)


def test_table_matches_oracle():
    sp = HorizonSpace((0.2, 0.5, 0.7), 2, 4)
    table = build_table(sp, DiscretizationCache(PlantModel(**SIM_PLANT)))
    sigmas, phis = horizon_products(**SIM_PLANT, gamma=sp.gamma, l_min=2, l_max=4)
    assert [table.horizon(i) for i in range(len(table))] == sigmas
    np.testing.assert_allclose(table.phis, phis, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(table.averages, [average_interval(s) for s in sigmas], rtol=1e-15)
    assert table.averages.min() >= 0.2 - 1e-15 and table.averages.max() <= 0.7 + 1e-15
