"""DC power flow and island detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import NumericalError
from .grid_model import GridCase, Topology

# per-island injection balance tolerance, p.u.
BALANCE_TOL_PU = 1e-8


@dataclass(frozen=True)
class FlowState:
    """Continuous part of the system state: branch flows under a given topology."""

    flow_mw: np.ndarray       # per branch, signed from -> to; exactly 0 on OFF branches
    injection_mw: np.ndarray  # per bus, generation minus served load
    island: np.ndarray        # island label per bus index
    angle_rad: np.ndarray     # per bus, 0 at each island's reference bus
    on: np.ndarray            # per branch ON/OFF mask the flows were solved for
    rating_mw: np.ndarray     # per branch

    @property
    def n_islands(self) -> int:
        return int(self.island.max()) + 1 if len(self.island) else 0


def find_islands(case: GridCase, topo: Topology) -> np.ndarray:
    """Label every bus with its island; labels are ordered by lowest bus index.

    Two buses share a label iff they are connected through ON branches.
    """
    on = topo.mask
    n = case.n_bus
    graph = coo_matrix(
        (np.ones(int(on.sum())), (case.from_idx[on], case.to_idx[on])), shape=(n, n)
    )
    _, labels = connected_components(graph, directed=False)
    return labels


def island_partition(case: GridCase, topo: Topology) -> list[list[int]]:
    """Islands as sorted lists of bus ids, ordered by their lowest member."""
    labels = find_islands(case, topo)
    groups: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(case.buses[idx].id)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def _susceptance(case: GridCase, on: np.ndarray) -> np.ndarray:
    b = 1.0 / case.reactance[on]
    f, t = case.from_idx[on], case.to_idx[on]
    n = case.n_bus
    bus = np.zeros((n, n))
    np.add.at(bus, (f, f), b)
    np.add.at(bus, (t, t), b)
    np.add.at(bus, (f, t), -b)
    np.add.at(bus, (t, f), -b)
    return bus


def dc_power_flow(case: GridCase, topo: Topology, injections_mw: np.ndarray) -> FlowState:
    """Solve bus angles island by island and return branch flows in MW.

    The reference bus of each island is its member with the lowest bus id.
    Raises ``ValueError`` if an island's injections do not balance and
    :class:`NumericalError` if an island's reduced system cannot be solved.
    """
    inj = np.asarray(injections_mw, dtype=float)
    if inj.shape != (case.n_bus,):
        raise ValueError(f"expected {case.n_bus} injections, got shape {inj.shape}")
    labels = find_islands(case, topo)
    on = topo.mask
    inj_pu = inj / case.base_mva
    bus_b = _susceptance(case, on)
    ids = np.array([b.id for b in case.buses])
    theta = np.zeros(case.n_bus)

    for lab in range(int(labels.max()) + 1 if case.n_bus else 0):
        members = np.flatnonzero(labels == lab)
        imbalance = inj_pu[members].sum()
        if abs(imbalance) > BALANCE_TOL_PU:
            raise ValueError(f"island {lab} injections unbalanced by {imbalance * case.base_mva:.3e} MW")
        if len(members) == 1:
            continue
        ref = members[np.argmin(ids[members])]
        rest = members[members != ref]
        sub = bus_b[np.ix_(rest, rest)]
        try:
            sol = np.linalg.solve(sub, inj_pu[rest])
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular susceptance matrix in island {lab}: {exc}") from None
        if not np.all(np.isfinite(sol)):
            raise NumericalError(f"non-finite bus angles in island {lab}")
        theta[rest] = sol

    flow = np.zeros(case.k_a)
    flow[on] = (theta[case.from_idx[on]] - theta[case.to_idx[on]]) / case.reactance[on] * case.base_mva
    return FlowState(flow, inj, labels, theta, on, case.rating)
