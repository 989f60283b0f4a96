from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_risk.grid_model import Branch, Bus, Generator, GridCase, Load, Topology
from cascade_risk.power_flow import dc_power_flow, find_islands
from cascade_risk.redispatch import RATING_TOL, min_load_shed

from conftest import random_case


def _check_feasible(case: GridCase, topo: Topology, res, cap: np.ndarray) -> None:
    on = topo.mask
    assert np.all(np.abs(res.flow.flow_mw[on]) <= case.rating[on] * (1 + RATING_TOL) + 1e-9)
    assert np.all(res.flow.flow_mw[~on] == 0.0)
    assert np.all(res.gen_mw >= 0) and np.all(res.gen_mw <= case.gen_pmax + 1e-9)
    assert np.all(res.served_mw >= 0) and np.all(res.served_mw <= cap + 1e-9)
    labels = find_islands(case, topo)
    for lab in np.unique(labels):
        g = res.gen_mw[labels[case.gen_bus_idx] == lab].sum()
        d = res.served_mw[labels[case.load_bus_idx] == lab].sum()
        assert g == pytest.approx(d, abs=1e-6)
    assert res.shed_mw == pytest.approx(case.total_demand - res.total_served, abs=1e-9)


def test_two_bus_sheds_twenty(toy2):
    res = min_load_shed(toy2, Topology.intact(1))
    assert res.shed_mw == pytest.approx(20.0, abs=1e-6)
    assert res.flow.flow_mw[0] == pytest.approx(80.0, abs=1e-6)


def test_no_overload_no_shed(triangle):
    res = min_load_shed(triangle, Topology.intact(3))
    assert res.shed_mw == pytest.approx(0.0, abs=1e-6)
    np.testing.assert_allclose(res.flow.flow_mw, [30.0, 30.0, 60.0], atol=1e-6)


def test_island_without_generation_sheds_its_load():
    case = GridCase(
        (Bus(1), Bus(2), Bus(3)),
        (Branch(1, 1, 2, 0.1, 100.0), Branch(2, 2, 3, 0.1, 100.0)),
        (Generator(1, 200.0),),
        (Load(2, 30.0), Load(3, 50.0)),
    )
    res = min_load_shed(case, Topology.intact(2).switch_off([1]))
    assert res.shed_mw == pytest.approx(50.0, abs=1e-6)
    np.testing.assert_allclose(res.served_mw, [30.0, 0.0], atol=1e-6)


def test_triangle_after_direct_line_trip(triangle):
    res = min_load_shed(triangle, Topology.intact(3).switch_off([2]))
    assert res.shed_mw == pytest.approx(50.0, abs=1e-6)


def test_previous_dispatch_caps_served(toy2):
    first = min_load_shed(toy2, Topology.intact(1))
    again = min_load_shed(toy2, Topology.intact(1), previous=first)
    assert again.shed_mw == pytest.approx(first.shed_mw, abs=1e-9)
    assert np.all(again.served_mw <= first.served_mw + 1e-12)


def _random_topology(case: GridCase, rng: np.random.Generator) -> Topology:
    off = rng.choice(case.k_a, int(rng.integers(0, case.k_a + 1)), replace=False)
    return Topology.intact(case.k_a).switch_off(off.tolist())


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=120)
def test_feasibility(seed):
    rng = np.random.default_rng(seed)
    case = random_case(rng, connected=bool(rng.integers(0, 2)))
    topo = _random_topology(case, rng)
    res = min_load_shed(case, topo)
    _check_feasible(case, topo, res, case.demand)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60)
def test_cumulative_shed_never_decreases(seed):
    rng = np.random.default_rng(seed)
    case = random_case(rng)
    topo = Topology.intact(case.k_a)
    res = min_load_shed(case, topo)
    for k in rng.permutation(case.k_a):
        cap = res.served_mw
        topo = topo.switch_off([int(k)])
        nxt = min_load_shed(case, topo, previous=res)
        _check_feasible(case, topo, nxt, cap)
        assert nxt.shed_mw >= res.shed_mw - 1e-7
        res = nxt


def _grid_best(case: GridCase, topo: Topology, steps: int = 41) -> float:
    """Brute-force the largest servable load over a grid of generator and load levels."""
    levels_g = [np.linspace(0.0, p, steps) for p in case.gen_pmax]
    levels_d = [np.linspace(0.0, d, steps) for d in case.demand]
    on = topo.mask
    labels = find_islands(case, topo)
    best = 0.0
    for g in itertools.product(*levels_g):
        for d in itertools.product(*levels_d):
            inj = np.zeros(case.n_bus)
            np.add.at(inj, case.gen_bus_idx, g)
            np.add.at(inj, case.load_bus_idx, -np.array(d))
            ok = all(abs(inj[labels == lab].sum()) < 1e-9 for lab in np.unique(labels))
            if not ok:
                continue
            fs = dc_power_flow(case, topo, inj)
            if np.all(np.abs(fs.flow_mw[on]) <= case.rating[on] + 1e-9):
                best = max(best, float(sum(d)))
    return best


@pytest.mark.parametrize("seed", range(12))
def test_lp_beats_discretized_search(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(2, 5))
    ids = list(range(1, n + 1))
    branches = [Branch(i, i, i + 1, float(rng.uniform(0.05, 0.5)), float(rng.uniform(10, 80))) for i in range(1, n)]
    branches.append(Branch(n, 1, n, float(rng.uniform(0.05, 0.5)), float(rng.uniform(10, 80))))
    gb = rng.choice(ids, 2, replace=False)
    case = GridCase(
        tuple(Bus(i) for i in ids),
        tuple(branches),
        tuple(Generator(int(b), float(rng.uniform(20, 120))) for b in gb),
        (Load(int(rng.choice(ids)), float(rng.uniform(20, 120))),),
    )
    topo = _random_topology(case, rng) if seed % 2 else Topology.intact(case.k_a)
    res = min_load_shed(case, topo)
    _check_feasible(case, topo, res, case.demand)
    assert res.total_served >= _grid_best(case, topo, 21) - 1e-6
