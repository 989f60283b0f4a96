"""Path probabilities, sample weights and risk estimators.

A path's probability factorizes over components: component ``k`` contributes
``Gamma_k = prod(1 - p) over the stages it survived * p at the stage it failed``
(just the survival product if it never failed).  Changing the CoFPFs of a set
``K_c`` therefore rescales each sample by

    w = prod_{k in K_c} Gamma(new_k) / Gamma(old_k)

which only needs the recorded load ratios of those components.  Everything is
accumulated in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .archive import SampleArchive
from .cofpf import CoFPF, CoFPFSet
from .errors import DataError, NumericalError
from .records import CascadeSample

LOW_ESS_FRACTION = 0.01


@dataclass(frozen=True)
class Scenario:
    """A set of components whose CoFPFs are replaced."""

    changes: Mapping[int, CoFPF]
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "changes", dict(sorted(self.changes.items())))
        for k in self.changes:
            if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 0:
                raise ValueError(f"invalid component id {k!r}")

    @classmethod
    def identity(cls, label: str = "identity") -> Scenario:
        return cls({}, label)

    @property
    def components(self) -> tuple[int, ...]:
        return tuple(self.changes)

    def effective(self, baseline: CoFPFSet) -> dict[int, CoFPF]:
        """The changes that actually differ from ``baseline``."""
        out = {}
        for k, f in self.changes.items():
            if k >= len(baseline):
                raise ValueError(f"scenario component {k} out of range [0, {len(baseline)})")
            if f != baseline[k]:
                out[k] = f
        return out

    def apply(self, baseline: CoFPFSet) -> CoFPFSet:
        return baseline.replace(self.changes)


@dataclass(frozen=True)
class RiskEstimate:
    y0_mw: float
    value: float
    stderr: float
    ess: float
    n: int
    w_min: float = 1.0
    w_max: float = 1.0
    w_mean: float = 1.0
    low_ess: bool = False

    def to_dict(self) -> dict:
        return {
            "y0_mw": self.y0_mw, "risk_mw": self.value, "stderr_mw": self.stderr, "ess": self.ess,
            "n": self.n, "w_min": self.w_min, "w_max": self.w_max, "w_mean": self.w_mean,
            "low_ess": self.low_ess,
        }


# --------------------------------------------------------------------------
# per-sample (scalar) route
# --------------------------------------------------------------------------


def gamma(sample: CascadeSample, component: int, f: CoFPF) -> float:
    """``ln Gamma`` of ``component`` on ``sample`` under CoFPF ``f``."""
    total = 0.0
    seen = False
    for st in sample.stages:
        s = st.conditions.get(component)
        if s is None:
            if seen:
                raise DataError(
                    f"sample {sample.index}: no condition for component {component} at stage {st.stage}"
                )
            if component in st.failed:
                raise DataError(f"sample {sample.index}: component {component} failed without a condition record")
            continue
        seen = True
        p = f(s)
        if component in st.failed:
            return total + math.log(p)
        total += math.log1p(-p)
    return total


def path_log_prob(sample: CascadeSample, cofpfs: CoFPFSet) -> float:
    """``ln g(z)`` as the sum of per-component log-Gamma values."""
    return math.fsum(gamma(sample, k, f) for k, f in enumerate(cofpfs))


def stagewise_log_prob(sample: CascadeSample, cofpfs: CoFPFSet) -> float:
    """``ln g(z)`` as the sum of per-stage transition log-probabilities.

    Independent of :func:`gamma`: it walks stage by stage, multiplying the
    failure probabilities of the failed set by the survival probabilities of
    the rest of the alive set.
    """
    terms = []
    for st in sample.stages:
        failed = set(st.failed)
        if not failed <= st.conditions.keys():
            raise DataError(f"sample {sample.index}: stage {st.stage} failed set not alive")
        step = 0.0
        for k, s in st.conditions.items():
            p = cofpfs[k](s)
            step += math.log(p) if k in failed else math.log1p(-p)
        terms.append(step)
    return math.fsum(terms)


def log_weight(sample: CascadeSample, scenario: Scenario, baseline: CoFPFSet) -> float:
    return math.fsum(
        gamma(sample, k, f) - gamma(sample, k, baseline[k]) for k, f in scenario.effective(baseline).items()
    )


def weight(sample: CascadeSample, scenario: Scenario, baseline: CoFPFSet) -> float:
    """Likelihood ratio of ``sample`` under ``scenario`` versus ``baseline``."""
    lw = log_weight(sample, scenario, baseline)
    w = math.exp(lw) if lw else 1.0
    if not math.isfinite(w) or w <= 0.0:
        raise NumericalError(f"sample {sample.index}: weight {w!r} (log {lw!r})")
    return w


# --------------------------------------------------------------------------
# archive (vectorized) route
# --------------------------------------------------------------------------


def build_gamma_matrix(archive: SampleArchive, cofpfs: CoFPFSet) -> np.ndarray:
    """``N x k_a`` log-Gamma matrix under ``cofpfs``.

    Columns whose CoFPF equals the archive baseline are copied from the stored
    matrix; only the others are recomputed.
    """
    if len(cofpfs) != archive.k_a:
        raise ValueError(f"{len(cofpfs)} CoFPFs for an archive with k_a={archive.k_a}")
    base = archive.cofpfs
    out = np.array(archive.log_gamma, copy=True)
    for k, f in enumerate(cofpfs):
        if f != base[k]:
            out[:, k] = archive.table.gamma_column(k, f)
    return out


def log_weights(archive: SampleArchive, scenario: Scenario, baseline: CoFPFSet | None = None) -> np.ndarray:
    if baseline is not None:
        archive.check_baseline(baseline)
    changes = scenario.effective(archive.cofpfs)
    lw = np.zeros(len(archive))
    for k, f in changes.items():
        lw += archive.table.gamma_column(k, f) - archive.log_gamma[:, k]
    return lw


def weights(archive: SampleArchive, scenario: Scenario, baseline: CoFPFSet | None = None) -> np.ndarray:
    """Per-sample weights; exactly 1 wherever the scenario changes nothing."""
    lw = log_weights(archive, scenario, baseline)
    w = np.exp(lw)
    bad = ~np.isfinite(w) | (w <= 0.0)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"sample {i}: weight {w[i]!r} (log {lw[i]!r})")
    return w


def _y(source: SampleArchive | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(source, SampleArchive):
        return source.y_mw
    return np.asarray(source, dtype=float)


def _estimate(y: np.ndarray, w: np.ndarray | None, y0: float) -> RiskEstimate:
    n = len(y)
    if n == 0:
        raise ValueError("risk estimate needs at least one sample")
    term = np.where(y >= y0, y, 0.0)
    if w is not None:
        term = w * term
    value = float(term.mean())
    stderr = float(term.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    if w is None:
        return RiskEstimate(float(y0), value, stderr, float(n), n)
    s1, s2 = float(w.sum()), float(np.dot(w, w))
    ess = s1 * s1 / s2
    return RiskEstimate(
        float(y0), value, stderr, ess, n, float(w.min()), float(w.max()), float(w.mean()),
        ess / n < LOW_ESS_FRACTION,
    )


def estimate_risk(source: SampleArchive | Sequence[float] | np.ndarray, y0: float) -> RiskEstimate:
    """Plain Monte Carlo estimate of ``E[y * 1{y >= y0}]``."""
    return _estimate(_y(source), None, y0)


def reweighted_risk(
    archive: SampleArchive,
    scenario: Scenario,
    y0: float,
    baseline: CoFPFSet | None = None,
    w: np.ndarray | None = None,
) -> RiskEstimate:
    """Risk under the scenario's CoFPFs estimated from baseline samples.

    ``baseline``, when given, must match the archive's generating CoFPFs.
    Precomputed weights can be passed as ``w`` to evaluate several ``y0``.
    """
    if w is None:
        w = weights(archive, scenario, baseline)
    elif baseline is not None:
        archive.check_baseline(baseline)
    return _estimate(archive.y_mw, w, y0)


def risk_curve(
    archive: SampleArchive, y0s: Iterable[float], scenario: Scenario | None = None
) -> list[RiskEstimate]:
    if scenario is None:
        return [estimate_risk(archive, y0) for y0 in y0s]
    w = weights(archive, scenario)
    return [_estimate(archive.y_mw, w, y0) for y0 in y0s]


# --------------------------------------------------------------------------
# VaR / CVaR
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CVaRResult:
    alpha: float
    var_mw: float
    cvar_mw: float
    tail_mass: float  # (1/N) sum w 1{y >= VaR}, i.e. 1 - alpha_hat

    @property
    def alpha_hat(self) -> float:
        """Realized (tie-adjusted) quantile level."""
        return 1.0 - self.tail_mass


def cvar(
    source: SampleArchive | Sequence[float] | np.ndarray, alpha: float, w: np.ndarray | None = None
) -> CVaRResult:
    """Empirical (optionally weighted) VaR and CVaR at level ``alpha``.

    VaR is the smallest sample value whose weighted CDF exceeds ``alpha``;
    CVaR is the weighted mean of the samples at or above it.  With
    ``tail_mass = 1 - alpha_hat`` the weighted fraction of samples at or
    above VaR, ``estimate(y0=VaR) == tail_mass * CVaR``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    y = _y(source)
    n = len(y)
    if n == 0:
        raise ValueError("CVaR needs at least one sample")
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    order = np.argsort(y, kind="stable")
    ys, ws = y[order], w[order]
    values, first = np.unique(ys, return_index=True)
    cum = np.cumsum(ws)
    ends = np.append(first[1:], n) - 1
    cdf = cum[ends] / cum[-1]
    var = float(values[int(np.argmax(cdf > alpha))])
    tail = y >= var
    mass = float(np.where(tail, w, 0.0).sum())
    tail_mass = mass / n
    cvar_value = float(np.where(tail, w * y, 0.0).sum()) / mass
    return CVaRResult(alpha, var, cvar_value, tail_mass)
