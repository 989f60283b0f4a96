"""Exact path enumeration for tiny systems.

Expands the cascade tree depth-first: at every state each subset of the alive
components may fail, the empty subset ending the path.  Transition
probabilities are products of scalar CoFPF evaluations, independent of the
vectorized code used by the sampler and the risk engine; post-failure states
come from the same redispatch as simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Any, Callable, Iterable, Iterator

import numpy as np

from .cascade_sim import CascadeModel, CascadeState
from .cofpf import CoFPFSet
from .errors import DataError, NumericalError
from .grid_model import GridCase
from .records import CascadeSample, StageRecord

MAX_COMPONENTS = 12
MASS_TOL = 1e-9


class OracleBudgetError(DataError):
    """The case has too many components to enumerate."""


@dataclass(frozen=True)
class EnumeratedPath:
    sample: CascadeSample  # stages, conditions and y; log_gamma is left empty
    log_g: float

    @property
    def g(self) -> float:
        return math.exp(self.log_g)

    @property
    def y_mw(self) -> float:
        return self.sample.y_mw


@dataclass(frozen=True)
class PathEnumeration:
    paths: tuple[EnumeratedPath, ...]
    total_mass: float
    k_a: int

    def __len__(self) -> int:
        return len(self.paths)

    def __iter__(self) -> Iterator[EnumeratedPath]:
        return iter(self.paths)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p.g for p in self.paths])

    @property
    def y_mw(self) -> np.ndarray:
        return np.array([p.y_mw for p in self.paths])

    def to_dict(self, y0s: Iterable[float] = ()) -> dict[str, Any]:
        return {
            "k_a": self.k_a,
            "n_paths": len(self.paths),
            "total_mass": self.total_mass,
            "exact_risk": [{"y0_mw": float(y0), "risk_mw": exact_risk(self, y0)} for y0 in y0s],
            "paths": [
                {
                    "stages": [
                        {"failed": list(st.failed), "cond": [[k, s] for k, s in sorted(st.conditions.items())]}
                        for st in p.sample.stages
                    ],
                    "log_g": p.log_g,
                    "g": p.g,
                    "y_mw": p.y_mw,
                }
                for p in self.paths
            ],
        }


def _subsets(items: tuple[int, ...]) -> Iterator[tuple[int, ...]]:
    """All subsets, by size then lexicographically; the empty set first."""
    for r in range(len(items) + 1):
        yield from combinations(items, r)


def enumerate_paths(
    case: GridCase,
    cofpfs: CoFPFSet,
    max_components: int = MAX_COMPONENTS,
    initial_outage: Iterable[int] = (),
    model: CascadeModel | None = None,
) -> PathEnumeration:
    """Every cascade path with its exact probability and load shed."""
    if max_components > MAX_COMPONENTS:
        raise ValueError(f"max_components is capped at {MAX_COMPONENTS}")
    if case.k_a > max_components:
        raise OracleBudgetError(f"case has {case.k_a} components; enumeration budget is {max_components}")
    if model is None:
        model = CascadeModel(case, cofpfs, initial_outage)

    paths: list[EnumeratedPath] = []

    def expand(state: CascadeState, stages: list[StageRecord], log_prob: float) -> None:
        alive = tuple(int(k) for k in state.alive)
        if not alive:
            _finish(state, stages, log_prob)
            return
        cond = dict(zip(alive, (float(s) for s in state.load_ratio)))
        p = {k: cofpfs[k](cond[k]) for k in alive}
        for failed in _subsets(alive):
            fs = set(failed)
            step = math.fsum(math.log(p[k]) if k in fs else math.log1p(-p[k]) for k in alive)
            rec = stages + [StageRecord(len(stages), failed, cond)]
            if failed:
                expand(model.child(state, failed), rec, log_prob + step)
            else:
                _finish(state, rec, log_prob + step)

    def _finish(state: CascadeState, stages: list[StageRecord], log_prob: float) -> None:
        sample = CascadeSample(len(paths), tuple(stages), model.shed_mw(state), np.zeros(0), log_prob)
        paths.append(EnumeratedPath(sample, log_prob))

    expand(model.root, [], 0.0)
    mass = math.fsum(p.g for p in paths)
    if abs(mass - 1.0) > MASS_TOL:
        raise NumericalError(f"enumerated probability mass {mass!r} differs from 1")
    return PathEnumeration(tuple(paths), mass, case.k_a)


def exact_risk(
    enumeration: PathEnumeration, y0: float, weight: Callable[[CascadeSample], float] | None = None
) -> float:
    """``sum g(z) h(z) 1{h(z) >= y0}``, optionally with each term multiplied by ``weight(z)``."""
    terms = []
    for p in enumeration.paths:
        if p.y_mw >= y0:
            t = p.g * p.y_mw
            if weight is not None:
                t *= weight(p.sample)
            terms.append(t)
    return math.fsum(terms)
