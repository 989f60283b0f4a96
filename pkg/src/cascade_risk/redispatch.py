"""Generator redispatch with minimum load shedding after each failure round.

The LP works on bus angles so islands decouple without rebuilding any PTDF:

    maximize    sum(served) - 1e-6 * sum(|gen - gen_ref|)
    subject to  gen - served = base_mva * B(topology) @ theta     at every bus
                |base_mva * (theta_f - theta_t) / x| <= rating    on every ON branch
                0 <= gen <= p_max,  0 <= served <= served_cap
                theta = 0 at each island's reference bus

``served_cap`` is the demand for the initial dispatch and the previously served
amount afterwards, so shed load is never reconnected within a cascade.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix, hstack, vstack, identity, csr_matrix

from .errors import NumericalError
from .grid_model import GridCase, Topology
from .power_flow import FlowState, dc_power_flow, find_islands

TIE_BREAK_WEIGHT = 1e-6
# relative slack allowed on branch ratings after the LP solve
RATING_TOL = 1e-6


@dataclass(frozen=True)
class DispatchResult:
    gen_mw: np.ndarray     # per generator
    served_mw: np.ndarray  # per load
    demand_mw: np.ndarray  # per load
    shed_mw: float         # total demand minus total served
    flow: FlowState
    feasible: bool = True

    @property
    def served_fraction(self) -> np.ndarray:
        frac = np.ones_like(self.served_mw)
        np.divide(self.served_mw, self.demand_mw, out=frac, where=self.demand_mw > 0)
        return frac

    @property
    def total_served(self) -> float:
        return float(self.served_mw.sum())


def _reference_dispatch(case: GridCase) -> np.ndarray:
    cap = case.gen_pmax.sum()
    if cap <= 0:
        return np.zeros(len(case.generators))
    return case.gen_pmax * min(1.0, case.total_demand / cap)


def min_load_shed(case: GridCase, topo: Topology, previous: DispatchResult | None = None) -> DispatchResult:
    """Restore a feasible operating point on ``topo`` shedding as little load as possible.

    ``previous`` is the dispatch before this failure round.  It caps each load at
    what was served before and serves as the reference for the tie-break term.
    """
    nb, ng, nl = case.n_bus, len(case.generators), len(case.loads)
    if previous is None:
        gen_ref = _reference_dispatch(case)
        served_cap = case.demand.copy()
    else:
        gen_ref = previous.gen_mw
        served_cap = previous.served_mw

    on = np.flatnonzero(topo.mask)
    f, t = case.from_idx[on], case.to_idx[on]
    coef = case.base_mva / case.reactance[on]
    m = len(on)

    # branch flow rows: flow = coef * (theta_f - theta_t)
    rows = np.repeat(np.arange(m), 2)
    cols = np.column_stack([f, t]).ravel()
    vals = np.column_stack([coef, -coef]).ravel()
    flow_theta = coo_matrix((vals, (rows, cols)), shape=(m, nb)).tocsr()
    # nodal balance: gen - served - incidence^T flow = 0
    inc = coo_matrix(
        (np.r_[np.ones(m), -np.ones(m)], (np.r_[np.arange(m), np.arange(m)], np.r_[f, t])), shape=(m, nb)
    ).tocsr()
    cg = coo_matrix((np.ones(ng), (case.gen_bus_idx, np.arange(ng))), shape=(nb, ng))
    cd = coo_matrix((np.ones(nl), (case.load_bus_idx, np.arange(nl))), shape=(nb, nl))
    a_eq = hstack([-(inc.T @ flow_theta), cg, -cd, csr_matrix((nb, ng))]).tocsr()
    b_eq = np.zeros(nb)

    eye_g = identity(ng, format="csr")
    a_ub = vstack([
        hstack([flow_theta, csr_matrix((m, ng + nl + ng))]),
        hstack([-flow_theta, csr_matrix((m, ng + nl + ng))]),
        hstack([csr_matrix((ng, nb)), eye_g, csr_matrix((ng, nl)), -eye_g]),
        hstack([csr_matrix((ng, nb)), -eye_g, csr_matrix((ng, nl)), -eye_g]),
    ]).tocsr()
    rating = case.rating[on]
    b_ub = np.r_[rating, rating, gen_ref, -gen_ref]

    labels = find_islands(case, topo)
    ids = np.array([b.id for b in case.buses])
    theta_bounds = [(None, None)] * nb
    for lab in range(int(labels.max()) + 1):
        members = np.flatnonzero(labels == lab)
        ref = members[np.argmin(ids[members])]
        theta_bounds[ref] = (0.0, 0.0)
    bounds = (
        theta_bounds
        + [(0.0, float(p)) for p in case.gen_pmax]
        + [(0.0, float(d)) for d in served_cap]
        + [(0.0, None)] * ng
    )
    c = np.r_[np.zeros(nb + ng), -np.ones(nl), np.full(ng, TIE_BREAK_WEIGHT)]

    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0 or res.x is None:
        raise NumericalError(f"load-shedding LP failed: {res.message}")

    gen = np.clip(res.x[nb:nb + ng], 0.0, case.gen_pmax)
    served = np.clip(res.x[nb + ng:nb + ng + nl], 0.0, served_cap)
    gen = _rebalance(case, labels, gen, served)  # adjusts served in place if needed
    injection = np.zeros(nb)
    np.add.at(injection, case.gen_bus_idx, gen)
    np.add.at(injection, case.load_bus_idx, -served)
    flow = dc_power_flow(case, topo, injection)

    over = np.abs(flow.flow_mw[on]) > rating * (1 + RATING_TOL)
    if over.any():
        raise NumericalError(f"redispatch left branch {int(on[over][0])} above its rating")
    shed = max(case.total_demand - float(served.sum()), 0.0)
    return DispatchResult(gen, served, case.demand, shed, flow, True)


def _rebalance(case: GridCase, labels: np.ndarray, gen: np.ndarray, served: np.ndarray) -> np.ndarray:
    """Absorb LP round-off so every island's injections sum to zero.

    The residual goes to the island's largest generator; whatever its bounds
    cannot take comes off the island's largest served load.
    """
    gen = gen.copy()
    gen_island = labels[case.gen_bus_idx]
    load_island = labels[case.load_bus_idx]
    for lab in np.unique(np.r_[gen_island, load_island]):
        gi = np.flatnonzero(gen_island == lab)
        li = np.flatnonzero(load_island == lab)
        residual = served[li].sum() - gen[gi].sum()
        if residual == 0.0:
            continue
        if len(gi):
            j = gi[np.argmax(gen[gi])]
            new = min(max(gen[j] + residual, 0.0), case.gen_pmax[j])
            residual -= new - gen[j]
            gen[j] = new
        if residual != 0.0 and len(li):
            j = li[np.argmax(served[li])]
            served[j] = max(served[j] - residual, 0.0)
    return gen
