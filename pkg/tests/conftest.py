from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from cascade_risk.cofpf import CoFPF, CoFPFSet, Form, uniform_pmin_cofpfs
from cascade_risk.grid_model import Branch, Bus, Generator, GridCase, Load, builtin_case_path, load_case

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

logging.getLogger("cascade_risk").setLevel(logging.ERROR)

# a 40-branch variant of case30 (branch 29-30 removed) with loads raised 30%
CASE30_DROP = 39
STRESS = 1.3


def constant(p: float) -> CoFPF:
    """CoFPF that returns ``p`` for any load ratio a feasible dispatch can produce."""
    return CoFPF(Form.PIECEWISE, p, (1.0 + p) / 2.0, 1e3, 1e3 + 1.0)


@pytest.fixture(scope="session")
def toy2() -> GridCase:
    return load_case(builtin_case_path("toy2.json"))


@pytest.fixture(scope="session")
def triangle() -> GridCase:
    return load_case(builtin_case_path("triangle.json"))


@pytest.fixture(scope="session")
def case30() -> GridCase:
    return load_case(builtin_case_path("case30.m"))


@pytest.fixture(scope="session")
def case30_stressed(case30: GridCase) -> GridCase:
    return case30.scaled(STRESS)


@pytest.fixture(scope="session")
def case40(case30: GridCase) -> GridCase:
    return case30.without_branches([CASE30_DROP]).scaled(STRESS)


def triangle_cofpfs() -> CoFPFSet:
    """Failure rates high enough that every path shape of the triangle is common."""
    return CoFPFSet([CoFPF(Form.PIECEWISE, p, 0.95, 0.7, 1.1) for p in (0.03, 0.05, 0.04)])


@pytest.fixture(scope="session")
def tri_cofpfs() -> CoFPFSet:
    return triangle_cofpfs()


@pytest.fixture(scope="session")
def case30_cofpfs(case30_stressed: GridCase) -> CoFPFSet:
    return uniform_pmin_cofpfs(case30_stressed.k_a, seed=11)


@pytest.fixture(scope="session")
def case30_archive(case30_stressed, case30_cofpfs):
    from cascade_risk.cascade_sim import run_batch

    return run_batch(case30_stressed, case30_cofpfs, 2000, master_seed=3)


@pytest.fixture(scope="session")
def tri_archive(triangle, tri_cofpfs):
    from cascade_risk.cascade_sim import run_batch

    return run_batch(triangle, tri_cofpfs, 4000, master_seed=5)


# --------------------------------------------------------------------------
# hypothesis strategies
# --------------------------------------------------------------------------


@st.composite
def grid_cases(draw, min_bus: int = 2, max_bus: int = 6, connected: bool = False) -> GridCase:
    """Small random networks: a random tree (optional) plus extra branches."""
    n = draw(st.integers(min_bus, max_bus))
    ids = draw(st.lists(st.integers(1, 99), min_size=n, max_size=n, unique=True))
    edges = []
    if connected:
        for i in range(1, n):
            edges.append((ids[draw(st.integers(0, i - 1))], ids[i]))
    extra = draw(st.integers(0 if connected else 1, n))
    for _ in range(extra):
        a, b = draw(st.lists(st.sampled_from(ids), min_size=2, max_size=2, unique=True))
        edges.append((a, b))
    branches = tuple(
        Branch(j + 1, a, b, draw(st.floats(0.02, 0.6)), draw(st.floats(5.0, 120.0)))
        for j, (a, b) in enumerate(edges)
    )
    gens = tuple(
        Generator(draw(st.sampled_from(ids)), draw(st.floats(0.0, 150.0)))
        for _ in range(draw(st.integers(1, 3)))
    )
    loads = tuple(
        Load(draw(st.sampled_from(ids)), draw(st.floats(0.0, 120.0)))
        for _ in range(draw(st.integers(1, 3)))
    )
    return GridCase(tuple(Bus(i) for i in ids), branches, gens, loads, draw(st.sampled_from([10.0, 100.0])))


def random_case(rng: np.random.Generator, n_bus: int | None = None, connected: bool = True) -> GridCase:
    """numpy-driven counterpart of :func:`grid_cases` for bulk randomized checks."""
    n = int(n_bus or rng.integers(2, 7))
    ids = [int(v) for v in rng.permutation(np.arange(1, 60))[:n]]
    edges = [(ids[int(rng.integers(0, i))], ids[i]) for i in range(1, n)] if connected else []
    for _ in range(int(rng.integers(0, n + 1))):
        a, b = rng.choice(n, 2, replace=False)
        edges.append((ids[a], ids[b]))
    if not edges:
        edges.append((ids[0], ids[1]))
    branches = tuple(
        Branch(j + 1, a, b, float(rng.uniform(0.02, 0.6)), float(rng.uniform(5.0, 120.0)))
        for j, (a, b) in enumerate(edges)
    )
    gens = tuple(Generator(ids[int(rng.integers(0, n))], float(rng.uniform(0, 150))) for _ in range(rng.integers(1, 4)))
    loads = tuple(Load(ids[int(rng.integers(0, n))], float(rng.uniform(0, 120))) for _ in range(rng.integers(1, 4)))
    return GridCase(tuple(Bus(i) for i in ids), branches, gens, loads, 100.0)
