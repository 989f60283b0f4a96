"""Markov cascade sampler.

Starting from the deterministic initial state, every draw round:

1. records the load ratio of each alive component,
2. draws one uniform per alive component in component-id order and fails
   those with ``u < p_fail``,
3. stops if nothing failed; otherwise switches the failed branches off,
   redispatches and re-solves the flows, and starts the next round.

The state reached after a given sequence of failure sets is deterministic, so
:class:`CascadeModel` memoizes it.  Sample ``i`` of a batch draws from its own
stream ``(master_seed, i)``; results do not depend on the worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .archive import SampleArchive, make_header
from .cofpf import CoFPFSet, load_ratios
from .errors import NumericalError
from .grid_model import GridCase, Topology, case_hash
from .records import CascadeSample, ConditionTable, StageRecord
from .redispatch import DispatchResult, min_load_shed

History = tuple[tuple[int, ...], ...]


class SimulationError(NumericalError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"sample {index}: {cause}")


@dataclass(frozen=True)
class CascadeState:
    history: History
    topo: Topology
    dispatch: DispatchResult
    alive: np.ndarray       # ids of ON components, ascending
    load_ratio: np.ndarray  # aligned with alive
    p_fail: np.ndarray      # aligned with alive

    @property
    def served_mw(self) -> float:
        return self.dispatch.total_served


def sample_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent random stream for sample ``index`` of a batch."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(index,))))


class CascadeModel:
    """A case plus CoFPFs, with memoized post-failure states."""

    def __init__(self, case: GridCase, cofpfs: CoFPFSet, initial_outage: Iterable[int] = ()):
        if len(cofpfs) != case.k_a:
            raise ValueError(f"{len(cofpfs)} CoFPFs for {case.k_a} components")
        self.case = case
        self.cofpfs = cofpfs
        self.initial_outage = tuple(sorted(set(initial_outage)))
        for k in self.initial_outage:
            if not 0 <= k < case.k_a:
                raise ValueError(f"initial outage component {k} out of range [0, {case.k_a})")
        intact = Topology.intact(case.k_a)
        base = min_load_shed(case, intact)
        self.base_served_mw = base.total_served
        if self.initial_outage:
            topo = intact.switch_off(self.initial_outage)
            root = self._make_state((), topo, min_load_shed(case, topo, base))
        else:
            root = self._make_state((), intact, base)
        self.root = root
        self._states: dict[History, CascadeState] = {(): root}

    def _make_state(self, history: History, topo: Topology, dispatch: DispatchResult) -> CascadeState:
        alive = np.flatnonzero(topo.mask)
        ratio = load_ratios(dispatch.flow, alive)
        p = self.cofpfs.evaluate(alive, ratio)
        for a in (alive, ratio, p):
            a.flags.writeable = False
        return CascadeState(history, topo, dispatch, alive, ratio, p)

    @property
    def n_cached_states(self) -> int:
        return len(self._states)

    def cached_states(self) -> list[CascadeState]:
        """Every state solved so far, root first."""
        return list(self._states.values())

    def child(self, state: CascadeState, failed: Sequence[int]) -> CascadeState:
        """State after ``failed`` (a non-empty subset of ``state.alive``) trip."""
        history = state.history + (tuple(sorted(failed)),)
        nxt = self._states.get(history)
        if nxt is None:
            topo = state.topo.switch_off(failed)
            nxt = self._make_state(history, topo, min_load_shed(self.case, topo, state.dispatch))
            self._states[history] = nxt
        return nxt

    def shed_mw(self, state: CascadeState) -> float:
        """Load lost relative to the intact-network dispatch."""
        return max(self.base_served_mw - state.served_mw, 0.0)

    def walk(self, rng: np.random.Generator) -> tuple[list[tuple[CascadeState, np.ndarray]], CascadeState]:
        """Run one cascade; return ``(state, failed_mask)`` per draw round and the final state."""
        rounds = []
        state = self.root
        while len(state.alive):
            mask = rng.random(len(state.alive)) < state.p_fail
            rounds.append((state, mask))
            if not mask.any():
                break
            state = self.child(state, state.alive[mask].tolist())
        assert len(rounds) <= self.case.k_a + 1
        return rounds, state

    def sample(self, rng: np.random.Generator, index: int = 0) -> CascadeSample:
        rounds, final = self.walk(rng)
        stages = tuple(
            StageRecord(
                j,
                tuple(int(k) for k in st.alive[mask]),
                dict(zip(st.alive.tolist(), st.load_ratio.tolist())),
            )
            for j, (st, mask) in enumerate(rounds)
        )
        table = _table(0, [rounds])
        log_gamma = table.gamma_matrix(self.cofpfs)[0]
        return CascadeSample(index, stages, self.shed_mw(final), log_gamma, float(log_gamma.sum()))


def _table(first_index: int, walks: list[list[tuple[CascadeState, np.ndarray]]]) -> ConditionTable:
    ids, stage, comp, s, failed = [], [], [], [], []
    for offset, rounds in enumerate(walks):
        for j, (st, mask) in enumerate(rounds):
            ids.append(first_index + offset)
            stage.append(j)
            comp.append(st.alive)
            s.append(st.load_ratio)
            failed.append(mask)
    if not ids:
        return ConditionTable.empty(len(walks))
    lengths = [len(a) for a in comp]
    return ConditionTable(
        len(walks),
        np.repeat(np.array(ids, np.int64), lengths),
        np.repeat(np.array(stage, np.int32), lengths),
        np.concatenate(comp).astype(np.int32),
        np.concatenate(s),
        np.concatenate(failed),
    )


def sample_cascade(
    case: GridCase, cofpfs: CoFPFSet, rng: np.random.Generator, model: CascadeModel | None = None
) -> CascadeSample:
    """Draw one cascade.  Pass ``model`` to reuse its memoized states across calls."""
    if model is None:
        model = CascadeModel(case, cofpfs)
    return model.sample(rng)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


@dataclass
class _Block:
    start: int
    y: np.ndarray
    table: ConditionTable


def _simulate_block(model: CascadeModel, master_seed: int, start: int, stop: int) -> _Block:
    walks = []
    y = np.empty(stop - start)
    for i in range(start, stop):
        try:
            rounds, final = model.walk(sample_rng(master_seed, i))
        except NumericalError as exc:
            raise SimulationError(i, exc) from exc
        walks.append(rounds)
        y[i - start] = model.shed_mw(final)
    return _Block(start, y, _table(start, walks))


_worker_model: CascadeModel | None = None


def _init_worker(case: GridCase, cofpfs: CoFPFSet, initial_outage: tuple[int, ...]) -> None:
    global _worker_model
    _worker_model = CascadeModel(case, cofpfs, initial_outage)


def _worker_block(args: tuple[int, int, int]) -> _Block:
    assert _worker_model is not None
    return _simulate_block(_worker_model, *args)


def default_workers() -> int:
    env = os.environ.get("CASCADE_RISK_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_batch(
    case: GridCase,
    cofpfs: CoFPFSet,
    n: int,
    master_seed: int,
    workers: int = 1,
    initial_outage: Iterable[int] = (),
    progress: Callable[[int, int], None] | None = None,
    model: CascadeModel | None = None,
    block_size: int = 2000,
) -> SampleArchive:
    """Simulate ``n`` independent cascades into a sealed :class:`SampleArchive`."""
    if n < 0:
        raise ValueError("n must be >= 0")
    initial_outage = tuple(sorted(set(initial_outage)))
    if model is None or model.initial_outage != initial_outage or model.cofpfs != cofpfs or model.case != case:
        model = None
    blocks_per_worker = 4
    size = max(1, min(block_size, math.ceil(n / max(1, workers * blocks_per_worker)))) if workers > 1 else block_size
    spans = [(master_seed, s, min(s + size, n)) for s in range(0, n, size)]

    results: list[_Block] = []
    done = 0
    if workers <= 1 or len(spans) <= 1:
        if model is None:
            model = CascadeModel(case, cofpfs, initial_outage)
        for span in spans:
            results.append(_simulate_block(model, *span))
            done += span[2] - span[1]
            if progress:
                progress(done, n)
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(case, cofpfs, initial_outage)) as pool:
            for blk in pool.map(_worker_block, spans):
                results.append(blk)
                done += len(blk.y)
                if progress:
                    progress(done, n)

    table = ConditionTable.concat([b.table for b in results]) if results else ConditionTable.empty(0)
    y = np.concatenate([b.y for b in results]) if results else np.zeros(0)
    header = make_header(
        case_hash(case), cofpfs, master_seed, n, initial_outage,
        created={"tool": f"cascade_risk {__version__}"},
    )
    log_gamma = table.gamma_matrix(cofpfs)
    archive = SampleArchive(header, y, table, log_gamma)
    return archive


def describe_batch(archive: SampleArchive) -> dict[str, Any]:
    y = archive.y_mw
    return {
        "n": len(archive),
        "mean_y_mw": float(y.mean()) if len(y) else 0.0,
        "max_y_mw": float(y.max()) if len(y) else 0.0,
        "mean_stages": float(archive.n_failure_stages.mean()) if len(y) else 0.0,
    }
