"""What-if sweeps: risk under many changed-CoFPF scenarios from one archive.

Singles and pairs share their work: the log-Gamma column of each mutated
component is computed once, and every per-scenario sum the estimator needs is
an entry of a small Gram matrix over those columns.  For a pair ``(k, l)``
with ``E = exp(B - A)`` restricted to the mutated columns and ``L`` the
thresholded loss vector:

    sum_i w_i         = (E^T E)[k, l]
    sum_i w_i^2       = ((E*E)^T (E*E))[k, l]
    sum_i w_i L_i     = (E^T diag(L) E)[k, l]
    sum_i (w_i L_i)^2 = ((E*E)^T diag(L^2) (E*E))[k, l]

Scenarios read from a file may touch any number of components and are
evaluated one by one, with mutated columns cached per (component, CoFPF).
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Iterable, Sequence, TextIO

import numpy as np

from .archive import SampleArchive
from .cofpf import CoFPF, CoFPFError, Form
from .errors import DataError
from .risk_engine import LOW_ESS_FRACTION, RiskEstimate, Scenario, estimate_risk

CSV_COLUMNS = ("scenario", "components", "y0_mw", "risk_mw", "stderr_mw", "ess", "change_ratio_pct", "error")
MODES = ("singles", "pairs", "from-file")


@dataclass(frozen=True)
class Mutation:
    """How a scenario changes each of its components' CoFPF."""

    delta_pmin: float | None = None
    to_form: Form | None = None

    def __post_init__(self) -> None:
        if (self.delta_pmin is None) == (self.to_form is None):
            raise ValueError("a mutation needs exactly one of delta_pmin or to_form")
        if self.to_form is not None:
            object.__setattr__(self, "to_form", Form(self.to_form))

    def apply(self, f: CoFPF) -> CoFPF:
        """New CoFPF; ``delta_pmin`` lowers ``p_min`` by that amount."""
        if self.delta_pmin is not None:
            return f.with_pmin(f.p_min - self.delta_pmin)
        return f.with_form(self.to_form)

    @property
    def label(self) -> str:
        if self.delta_pmin is not None:
            return f"delta-pmin={self.delta_pmin:g}"
        return f"to-form={self.to_form.value}"


@dataclass(frozen=True)
class SweepRow:
    scenario: str
    components: tuple[int, ...]
    y0_mw: float
    risk_mw: float = math.nan
    stderr_mw: float = math.nan
    ess: float = math.nan
    change_ratio_pct: float = math.nan
    low_ess: bool = False
    error: str = ""

    def csv_fields(self) -> list[str]:
        def num(v: float) -> str:
            return "" if self.error else repr(float(v))

        return [
            self.scenario, " ".join(map(str, self.components)), repr(float(self.y0_mw)),
            num(self.risk_mw), num(self.stderr_mw), num(self.ess), num(self.change_ratio_pct), self.error,
        ]

    def to_dict(self) -> dict[str, Any]:
        d = {
            "scenario": self.scenario, "components": list(self.components), "y0_mw": self.y0_mw,
            "risk_mw": self.risk_mw, "stderr_mw": self.stderr_mw, "ess": self.ess,
            "change_ratio_pct": self.change_ratio_pct, "low_ess": self.low_ess,
        }
        if self.error:
            d = {k: d[k] for k in ("scenario", "components", "y0_mw")}
            d["error"] = self.error
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


@dataclass
class SweepReport:
    rows: list[SweepRow]
    baseline: list[RiskEstimate]
    n_scenarios: int
    timing: dict[str, float] = field(default_factory=dict)

    def sorted_by_ratio(self, descending: bool = True) -> list[SweepRow]:
        """Rows ordered by change ratio (error rows last)."""
        ok = [r for r in self.rows if not r.error and math.isfinite(r.change_ratio_pct)]
        rest = [r for r in self.rows if r not in ok]
        return sorted(ok, key=lambda r: r.change_ratio_pct, reverse=descending) + rest

    def write_csv(self, out: TextIO) -> None:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_fields())

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_scenarios": self.n_scenarios,
            "baseline": [b.to_dict() for b in self.baseline],
            "timing": self.timing,
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


# --------------------------------------------------------------------------
# scenario generators
# --------------------------------------------------------------------------


def singles(k_a: int) -> list[tuple[int, ...]]:
    return [(k,) for k in range(k_a)]


def pairs(k_a: int) -> list[tuple[int, ...]]:
    return list(combinations(range(k_a), 2))


def load_scenarios(path: str | Path, k_a: int) -> list[tuple[str, tuple[int, ...], dict[int, dict] | None]]:
    """Read scenarios from a JSON file.

    The file holds ``{"scenarios": [...]}`` where each entry has
    ``components`` (list of ids), an optional ``label`` and optional
    ``cofpfs`` mapping component ids to CoFPF field overrides.  Components
    without an override get the sweep's mutation.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    entries = doc.get("scenarios") if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise DataError(f"{path}: expected a list of scenarios")
    out = []
    for n, e in enumerate(entries):
        where = f"{path}: scenarios[{n}]"
        if not isinstance(e, dict) or not isinstance(e.get("components"), list):
            raise DataError(f"{where}: needs a 'components' list")
        comps = e["components"]
        if not all(isinstance(k, int) and 0 <= k < k_a for k in comps) or len(set(comps)) != len(comps):
            raise DataError(f"{where}: components must be distinct ids in [0, {k_a})")
        overrides = e.get("cofpfs")
        if overrides is not None:
            overrides = {int(k): v for k, v in overrides.items()}
            if not set(overrides) <= set(comps):
                raise DataError(f"{where}: 'cofpfs' names components outside 'components'")
        label = str(e.get("label", "+".join(map(str, sorted(comps)))))
        out.append((label, tuple(sorted(comps)), overrides))
    return out


# --------------------------------------------------------------------------
# engine
# --------------------------------------------------------------------------


def _losses(y: np.ndarray, y0s: Sequence[float]) -> np.ndarray:
    """``N x q`` matrix of ``y * 1{y >= y0}``."""
    y0 = np.asarray(y0s, dtype=float)
    return np.where(y[:, None] >= y0[None, :], y[:, None], 0.0)


def _ratio(r_g: float, r_f: float) -> float:
    """Signed change in percent; positive means the scenario lowers risk."""
    return (r_g - r_f) / r_g * 100.0 if r_g > 0 else (0.0 if r_f == r_g else math.nan)


def _rows_from_sums(
    label: str, comps: tuple[int, ...], y0s: Sequence[float], n: int,
    s_w: float, s_w2: float, s_wl: np.ndarray, s_wl2: np.ndarray, base: list[RiskEstimate],
) -> list[SweepRow]:
    value, stderr, ess, low = _stats(n, np.asarray(s_w), np.asarray(s_w2), np.asarray(s_wl), np.asarray(s_wl2))
    return [
        SweepRow(label, comps, float(y0), float(value[j]), float(stderr[j]), float(ess),
                 _ratio(base[j].value, float(value[j])), bool(low))
        for j, y0 in enumerate(y0s)
    ]


def _stats(n: int, s_w: np.ndarray, s_w2: np.ndarray, s_wl: np.ndarray, s_wl2: np.ndarray):
    """Estimate, standard error, ESS and low-ESS flag from weight/loss power sums."""
    with np.errstate(divide="ignore", invalid="ignore"):
        value = s_wl / n
        var = np.maximum(s_wl2 - s_wl * s_wl / n, 0.0) / (n - 1) if n > 1 else np.full(np.shape(s_wl), math.nan)
        stderr = np.sqrt(var / n)
        ess = s_w * s_w / s_w2
    return value, stderr, ess, ess / n < LOW_ESS_FRACTION


def _baseline_rows(label: str, comps: tuple[int, ...], base: list[RiskEstimate]) -> list[SweepRow]:
    return [SweepRow(label, comps, b.y0_mw, b.value, b.stderr, b.ess, 0.0) for b in base]


def _error_rows(label: str, comps: tuple[int, ...], y0s: Sequence[float], msg: str) -> list[SweepRow]:
    return [SweepRow(label, comps, float(y0), error=msg) for y0 in y0s]


def _label(comps: tuple[int, ...]) -> str:
    return "+".join(map(str, comps))


def run_sweep(
    archive: SampleArchive,
    mode: str | Sequence[str],
    mutation: Mutation | None,
    y0s: Sequence[float],
    scenarios: Iterable[tuple[str, tuple[int, ...], dict[int, dict] | None]] | None = None,
) -> SweepReport:
    """Estimate risk at every ``y0`` for every scenario of the chosen mode(s).

    ``mode`` is one of :data:`MODES` or a sequence of ``singles``/``pairs``,
    which are then evaluated together, sharing the mutated Gamma columns.
    """
    modes = (mode,) if isinstance(mode, str) else tuple(mode)
    if not modes or any(m not in MODES for m in modes):
        raise ValueError(f"unknown sweep mode {mode!r}; expected one of {MODES}")
    if "from-file" in modes and len(modes) > 1:
        raise ValueError("from-file mode cannot be combined with other modes")
    if not len(y0s):
        raise ValueError("sweep needs at least one y0")
    n = len(archive)
    if n < 1:
        raise ValueError("sweep needs a non-empty archive")
    t_start = time.perf_counter()
    base = [estimate_risk(archive, y0) for y0 in y0s]

    if modes == ("from-file",):
        if scenarios is None:
            raise ValueError("from-file mode needs scenarios")
        rows, n_scen, timing = _sweep_generic(archive, mutation, y0s, list(scenarios), base)
    else:
        if mutation is None:
            raise ValueError(f"{'/'.join(modes)} mode needs a mutation")
        combos: list[tuple[int, ...]] = []
        for m in modes:
            combos += singles(archive.k_a) if m == "singles" else pairs(archive.k_a)
        rows, timing = _sweep_gram(archive, mutation, y0s, combos, base)
        n_scen = len(combos)
    timing["total_s"] = time.perf_counter() - t_start
    return SweepReport(rows, base, n_scen, timing)


def _sweep_gram(
    archive: SampleArchive, mutation: Mutation, y0s: Sequence[float],
    combos: list[tuple[int, ...]], base: list[RiskEstimate],
) -> tuple[list[SweepRow], dict[str, float]]:
    n, baseline = len(archive), archive.cofpfs
    t0 = time.perf_counter()

    # mutated CoFPF per component, or the error that prevents it
    mutated: dict[int, CoFPF] = {}
    errors: dict[int, str] = {}
    for k in sorted({k for c in combos for k in c}):
        try:
            mutated[k] = mutation.apply(baseline[k])
        except CoFPFError as exc:
            errors[k] = f"component {k}: {exc}"
    changed = [k for k, f in mutated.items() if f != baseline[k]]
    m = len(changed)
    col = {k: j for j, k in enumerate(changed)}

    # exp(B - A) on the changed columns plus a trailing column of ones, so a
    # single is the pair (k, ones) and an unchanged member maps to ones
    ea = np.ones((n, m + 1))
    if m:
        cols = np.array(changed, dtype=np.int64)
        b = archive.table.gamma_matrix(baseline.replace({k: mutated[k] for k in changed}), columns=cols)
        np.exp(b[:, cols] - archive.log_gamma[:, cols], out=ea[:, :m])
    t1 = time.perf_counter()

    ok = [c for c in combos if not any(k in errors for k in c)]
    jj = np.array([col.get(c[0], m) for c in ok], dtype=np.intp)
    ll = np.array([col.get(c[1], m) if len(c) > 1 else m for c in ok], dtype=np.intp)
    loss = _losses(archive.y_mw, y0s)
    q = loss.shape[1]
    e2 = ea * ea
    s_wl = np.empty((q, len(ok)))
    s_wl2 = np.empty((q, len(ok)))
    if np.any((jj != m) & (ll != m)):
        # X^T X products (symmetric, so BLAS only does half); losses are >= 0
        s_w, s_w2 = (ea.T @ ea)[jj, ll], (e2.T @ e2)[jj, ll]
        for j in range(q):
            pos = loss[:, j] > 0
            x = ea[pos] * np.sqrt(loss[pos, j])[:, None]
            x2 = e2[pos] * loss[pos, j][:, None]
            s_wl[j], s_wl2[j] = (x.T @ x)[jj, ll], (x2.T @ x2)[jj, ll]
    else:
        s_w, s_w2 = ea.sum(axis=0)[jj], e2.sum(axis=0)[jj]
        s_wl[:], s_wl2[:] = (loss.T @ ea)[:, jj], ((loss * loss).T @ e2)[:, jj]
    value, stderr, ess, low = _stats(n, s_w, s_w2, s_wl, s_wl2)
    r_g = np.array([b.value for b in base])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(r_g[:, None] > 0, (r_g[:, None] - value) / r_g[:, None] * 100.0,
                         np.where(value == r_g[:, None], 0.0, np.nan))
    value, stderr, ratio = value.T.tolist(), stderr.T.tolist(), ratio.T.tolist()
    ess, low = ess.tolist(), low.tolist()

    rows: list[SweepRow] = []
    idx = 0
    y0f = [float(y) for y in y0s]
    for c in combos:
        label = _label(c)
        if any(k in errors for k in c):
            rows += _error_rows(label, c, y0s, "; ".join(errors[k] for k in c if k in errors))
            continue
        i = idx
        idx += 1
        if jj[i] == m and ll[i] == m:
            rows += _baseline_rows(label, c, base)
            continue
        v, se, r = value[i], stderr[i], ratio[i]
        rows += [SweepRow(label, c, y0f[j], v[j], se[j], ess[i], r[j], low[i]) for j in range(q)]
    t2 = time.perf_counter()
    return rows, {"b_matrix_s": t1 - t0, "estimate_s": t2 - t1}


def _sweep_generic(
    archive: SampleArchive, mutation: Mutation | None, y0s: Sequence[float],
    scenarios: list[tuple[str, tuple[int, ...], dict[int, dict] | None]], base: list[RiskEstimate],
) -> tuple[list[SweepRow], int, dict[str, float]]:
    n, baseline = len(archive), archive.cofpfs
    loss = _losses(archive.y_mw, y0s)
    cache: dict[tuple[int, CoFPF], np.ndarray] = {}
    t_b = t_est = 0.0
    rows: list[SweepRow] = []
    for label, comps, overrides in scenarios:
        t0 = time.perf_counter()
        try:
            changes = {}
            for k in comps:
                if overrides and k in overrides:
                    changes[k] = CoFPF.from_dict({**baseline[k].to_dict(), **overrides[k]})
                elif mutation is not None:
                    changes[k] = mutation.apply(baseline[k])
                else:
                    raise DataError(f"component {k}: no CoFPF override and no mutation given")
            scen = Scenario(changes, label)
            lw = np.zeros(n)
            for k, f in scen.effective(baseline).items():
                d = cache.get((k, f))
                if d is None:
                    d = cache[(k, f)] = archive.table.gamma_column(k, f) - archive.log_gamma[:, k]
                lw += d
        except (DataError, ValueError) as exc:
            rows += _error_rows(label, comps, y0s, str(exc))
            t_b += time.perf_counter() - t0
            continue
        w = np.exp(lw)
        t1 = time.perf_counter()
        t_b += t1 - t0
        if not np.all(np.isfinite(w)):
            rows += _error_rows(label, comps, y0s, "non-finite weight")
        elif not lw.any():
            rows += _baseline_rows(label, comps, base)
        else:
            wl = w[:, None] * loss
            rows += _rows_from_sums(label, comps, y0s, n, float(w.sum()), float(np.dot(w, w)),
                                    wl.sum(axis=0), (wl * wl).sum(axis=0), base)
        t_est += time.perf_counter() - t1
    return rows, len(scenarios), {"b_matrix_s": t_b, "estimate_s": t_est}
