"""Per-sample cascade records and the columnar table behind fast reweighting.

Each sampled cascade is stored as the sequence of draw rounds it went
through.  Round ``j`` holds the load ratio of every component alive at state
``x_j`` and the subset of those that failed.  A sample whose first round
produced no failure therefore still carries one round: the survival draws at
the initial state are part of its probability.

For whole archives the same information lives in a :class:`ConditionTable`,
one row per (sample, round, alive component), ordered by sample, round and
component id.  Every log-Gamma value is a sum of per-row terms, so matrices of
them reduce to a single ``bincount``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np

from .cofpf import CoFPF, CoFPFSet


@dataclass(frozen=True)
class StageRecord:
    stage: int
    failed: tuple[int, ...]
    conditions: Mapping[int, float]  # every component alive at this stage -> load ratio


@dataclass(frozen=True)
class CascadeSample:
    index: int
    stages: tuple[StageRecord, ...]
    y_mw: float
    log_gamma: np.ndarray = field(repr=False)  # per component, under the generating CoFPFs
    log_g: float

    @property
    def n(self) -> int:
        """Cascade length: number of stages at which at least one component failed."""
        return sum(1 for st in self.stages if st.failed)

    @property
    def failed_components(self) -> tuple[int, ...]:
        return tuple(k for st in self.stages for k in st.failed)

    def failure_stage(self, component: int) -> int | None:
        for st in self.stages:
            if component in st.failed:
                return st.stage
        return None


def log_term(f: CoFPF, s: float, failed: bool) -> float:
    p = f(s)
    return math.log(p) if failed else math.log1p(-p)


def _log_terms(p: np.ndarray, failed: np.ndarray) -> np.ndarray:
    out = np.log1p(-p)
    out[failed] = np.log(p[failed])
    return out


@dataclass(frozen=True)
class ConditionTable:
    n_samples: int
    sample: np.ndarray  # int64
    stage: np.ndarray   # int32
    comp: np.ndarray    # int32
    s: np.ndarray       # float64 load ratio
    failed: np.ndarray  # bool

    def __post_init__(self) -> None:
        for name in ("sample", "stage", "comp", "s", "failed"):
            getattr(self, name).flags.writeable = False

    @classmethod
    def empty(cls, n_samples: int = 0) -> ConditionTable:
        return cls(
            n_samples, np.zeros(0, np.int64), np.zeros(0, np.int32), np.zeros(0, np.int32),
            np.zeros(0, float), np.zeros(0, bool),
        )

    @classmethod
    def concat(cls, parts: list[ConditionTable]) -> ConditionTable:
        """Join tables whose ``sample`` columns already hold global indices."""
        if not parts:
            return cls.empty()
        cols = ("sample", "stage", "comp", "s", "failed")
        total = sum(p.n_samples for p in parts)
        return cls(total, *(np.concatenate([getattr(p, c) for p in parts]) for c in cols))

    def __len__(self) -> int:
        return len(self.s)

    @cached_property
    def sample_bounds(self) -> np.ndarray:
        """``rows[sample_bounds[i]:sample_bounds[i+1]]`` are the rows of sample ``i``."""
        return np.searchsorted(self.sample, np.arange(self.n_samples + 1))

    def log_terms(self, cofpfs: CoFPFSet, rows: np.ndarray | slice = slice(None)) -> np.ndarray:
        """``ln p`` for rows that failed, ``ln(1 - p)`` for rows that survived."""
        p = cofpfs.evaluate(self.comp[rows], self.s[rows])
        return _log_terms(p, self.failed[rows])

    def gamma_matrix(self, cofpfs: CoFPFSet, columns: np.ndarray | None = None) -> np.ndarray:
        """``n_samples x k_a`` matrix of log-Gamma values.

        Only the listed ``columns`` are computed when given; the rest are 0.
        """
        k_a, n_samples = len(cofpfs), self.n_samples
        if columns is None or len(np.unique(columns)) == k_a:
            rows: np.ndarray | slice = slice(None)
        else:
            rows = np.flatnonzero(np.isin(self.comp, columns))
        terms = self.log_terms(cofpfs, rows)
        flat = self.sample[rows] * k_a + self.comp[rows]
        out = np.bincount(flat, weights=terms, minlength=n_samples * k_a)
        return out.reshape(n_samples, k_a)

    @cached_property
    def _by_comp(self) -> tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.comp, kind="stable")
        k_max = int(self.comp.max()) + 1 if len(self.comp) else 0
        bounds = np.concatenate([[0], np.cumsum(np.bincount(self.comp, minlength=k_max))])
        return order, bounds

    def component_rows(self, component: int) -> np.ndarray:
        """Row indices of ``component``, in table order."""
        order, bounds = self._by_comp
        if component + 1 >= len(bounds):
            return order[:0]
        return order[bounds[component]:bounds[component + 1]]

    def gamma_column(self, component: int, f: CoFPF) -> np.ndarray:
        """Length-``n_samples`` vector of log-Gamma values of one component under ``f``."""
        rows = self.component_rows(component)
        terms = _log_terms(f.evaluate(self.s[rows]), self.failed[rows])
        return np.bincount(self.sample[rows], weights=terms, minlength=self.n_samples)

    def sample_rows(self, i: int) -> slice:
        b = self.sample_bounds
        return slice(int(b[i]), int(b[i + 1]))

    def stages_of(self, i: int) -> tuple[StageRecord, ...]:
        sl = self.sample_rows(i)
        stage, comp, s, failed = self.stage[sl], self.comp[sl], self.s[sl], self.failed[sl]
        out = []
        for j in np.unique(stage):
            m = stage == j
            out.append(StageRecord(
                int(j),
                tuple(int(k) for k in comp[m][failed[m]]),
                dict(zip((int(k) for k in comp[m]), (float(v) for v in s[m]))),
            ))
        return tuple(out)


def table_from_samples(samples: list[CascadeSample]) -> ConditionTable:
    sample, stage, comp, s, failed = [], [], [], [], []
    for pos, smp in enumerate(samples):
        for st in smp.stages:
            fail = set(st.failed)
            for k in sorted(st.conditions):
                sample.append(pos)
                stage.append(st.stage)
                comp.append(k)
                s.append(st.conditions[k])
                failed.append(k in fail)
    return ConditionTable(
        len(samples), np.array(sample, np.int64), np.array(stage, np.int32), np.array(comp, np.int32),
        np.array(s, float), np.array(failed, bool),
    )
