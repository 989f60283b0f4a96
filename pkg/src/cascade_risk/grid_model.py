"""Network data model, case-file parsing and structural validation.

Two input formats are understood:

* ``native`` -- a JSON document with explicit units in the key names::

      {
        "format": "cascade-case", "version": 1, "name": "toy",
        "base_mva": 100.0,
        "buses":      [{"id": 1, "name": "A"}, {"id": 2}],
        "branches":   [{"id": 1, "from": 1, "to": 2, "x_pu": 0.1, "rating_mw": 80.0}],
        "generators": [{"bus": 1, "p_max_mw": 100.0}],
        "loads":      [{"bus": 2, "demand_mw": 100.0}]
      }

* ``matpower`` -- the ``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen`` and
  ``mpc.branch`` blocks of a MATPOWER case file.  Everything else is skipped
  with a logged warning.

Every branch (line or transformer) is a failure-prone component.  Components
are addressed by their position in :attr:`GridCase.branches`, ``0..k_a-1``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

NATIVE_FORMAT = "cascade-case"
NATIVE_VERSION = 1


@dataclass(frozen=True)
class Bus:
    id: int
    name: str | None = None


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    x_pu: float
    rating_mw: float


@dataclass(frozen=True)
class Generator:
    bus: int
    p_max_mw: float
    p_min_mw: float = 0.0


@dataclass(frozen=True)
class Load:
    bus: int
    demand_mw: float


@dataclass(frozen=True)
class Diagnostic:
    """One validation or parse finding.  ``line``/``column`` are 1-based when known."""

    message: str
    location: str = ""
    line: int | None = None
    column: int | None = None

    def __str__(self) -> str:
        where = self.location
        if self.line is not None:
            pos = f"line {self.line}, column {self.column}"
            where = f"{where} ({pos})" if where else pos
        return f"{where}: {self.message}" if where else self.message


class CaseError(DataError):
    """Raised when a case file cannot be parsed or fails validation."""

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class GridCase:
    """Static network description.  Immutable; share freely across threads."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    base_mva: float = 100.0
    name: str = ""

    @property
    def k_a(self) -> int:
        """Number of failure-prone components (branches)."""
        return len(self.branches)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def from_idx(self) -> np.ndarray:
        return np.array([self.bus_index[br.from_bus] for br in self.branches], dtype=np.intp)

    @cached_property
    def to_idx(self) -> np.ndarray:
        return np.array([self.bus_index[br.to_bus] for br in self.branches], dtype=np.intp)

    @cached_property
    def reactance(self) -> np.ndarray:
        return np.array([br.x_pu for br in self.branches], dtype=float)

    @cached_property
    def rating(self) -> np.ndarray:
        return np.array([br.rating_mw for br in self.branches], dtype=float)

    @cached_property
    def gen_bus_idx(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=np.intp)

    @cached_property
    def gen_pmax(self) -> np.ndarray:
        return np.array([g.p_max_mw for g in self.generators], dtype=float)

    @cached_property
    def load_bus_idx(self) -> np.ndarray:
        return np.array([self.bus_index[ld.bus] for ld in self.loads], dtype=np.intp)

    @cached_property
    def demand(self) -> np.ndarray:
        return np.array([ld.demand_mw for ld in self.loads], dtype=float)

    @property
    def total_demand(self) -> float:
        return float(sum(ld.demand_mw for ld in self.loads))

    def scaled(self, load_factor: float, name: str | None = None) -> GridCase:
        """Copy of the case with every demand multiplied by ``load_factor``."""
        loads = tuple(replace(ld, demand_mw=ld.demand_mw * load_factor) for ld in self.loads)
        return replace(self, loads=loads, name=self.name if name is None else name)

    def without_branches(self, ids: Iterable[int]) -> GridCase:
        """Copy of the case with the branches of the given ``Branch.id`` values removed."""
        drop = set(ids)
        return replace(self, branches=tuple(br for br in self.branches if br.id not in drop))


@dataclass(frozen=True)
class Topology:
    """Per-branch ON/OFF status.  Branches can be switched off but never back on."""

    status: tuple[bool, ...]

    @classmethod
    def intact(cls, k_a: int) -> Topology:
        return cls((True,) * k_a)

    def __len__(self) -> int:
        return len(self.status)

    @cached_property
    def mask(self) -> np.ndarray:
        m = np.array(self.status, dtype=bool)
        m.flags.writeable = False
        return m

    @property
    def on_ids(self) -> tuple[int, ...]:
        return tuple(k for k, on in enumerate(self.status) if on)

    def is_on(self, component: int) -> bool:
        return self.status[component]

    def switch_off(self, components: Iterable[int]) -> Topology:
        status = list(self.status)
        for k in components:
            status[k] = False
        return Topology(tuple(status))


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def validate_case(case: GridCase) -> list[Diagnostic]:
    """Check every structural invariant of ``case``; an empty list means valid."""
    diags: list[Diagnostic] = []

    def finite_nonneg(v: float) -> bool:
        return isinstance(v, (int, float)) and math.isfinite(v) and v >= 0

    if not (isinstance(case.base_mva, (int, float)) and math.isfinite(case.base_mva) and case.base_mva > 0):
        diags.append(Diagnostic(f"base_mva must be positive, got {case.base_mva!r}", "base_mva"))
    if not case.buses:
        diags.append(Diagnostic("case has no buses", "buses"))

    seen_bus: set[int] = set()
    for i, bus in enumerate(case.buses):
        if bus.id in seen_bus:
            diags.append(Diagnostic(f"duplicate bus id {bus.id}", f"buses[{i}]"))
        seen_bus.add(bus.id)

    seen_branch: set[int] = set()
    for i, br in enumerate(case.branches):
        loc = f"branches[{i}] (id {br.id})"
        if br.id in seen_branch:
            diags.append(Diagnostic(f"duplicate branch id {br.id}", loc))
        seen_branch.add(br.id)
        for end, bus in (("from", br.from_bus), ("to", br.to_bus)):
            if bus not in seen_bus:
                diags.append(Diagnostic(f"unknown bus {bus} at '{end}' end", loc))
        if br.from_bus == br.to_bus:
            diags.append(Diagnostic(f"branch connects bus {br.from_bus} to itself", loc))
        if not (math.isfinite(br.x_pu) and br.x_pu > 0):
            diags.append(Diagnostic(f"reactance must be positive, got {br.x_pu!r}", loc))
        if not (math.isfinite(br.rating_mw) and br.rating_mw > 0):
            diags.append(Diagnostic(f"rating must be positive, got {br.rating_mw!r}", loc))

    for i, g in enumerate(case.generators):
        loc = f"generators[{i}]"
        if g.bus not in seen_bus:
            diags.append(Diagnostic(f"unknown bus {g.bus}", loc))
        if not finite_nonneg(g.p_max_mw):
            diags.append(Diagnostic(f"p_max must be finite and >= 0, got {g.p_max_mw!r}", loc))
        if g.p_min_mw != 0:
            diags.append(Diagnostic(f"p_min must be 0, got {g.p_min_mw!r}", loc))

    for i, ld in enumerate(case.loads):
        loc = f"loads[{i}]"
        if ld.bus not in seen_bus:
            diags.append(Diagnostic(f"unknown bus {ld.bus}", loc))
        if not finite_nonneg(ld.demand_mw):
            diags.append(Diagnostic(f"demand must be finite and >= 0, got {ld.demand_mw!r}", loc))

    return diags


# --------------------------------------------------------------------------
# native format
# --------------------------------------------------------------------------


_FIELDS = {
    "buses": ({"id"}, {"name"}),
    "branches": ({"id", "from", "to", "x_pu", "rating_mw"}, {"status"}),
    "generators": ({"bus", "p_max_mw"}, {"p_min_mw"}),
    "loads": ({"bus", "demand_mw"}, set()),
}
_TOP_REQUIRED = {"format", "version", "base_mva", "buses", "branches", "generators", "loads"}
_TOP_OPTIONAL = {"name"}


class _Collector:
    def __init__(self) -> None:
        self.diags: list[Diagnostic] = []

    def error(self, message: str, location: str = "") -> None:
        self.diags.append(Diagnostic(message, location))

    def number(self, rec: dict, key: str, loc: str, integer: bool = False) -> Any:
        v = rec.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.error(f"'{key}' must be a number, got {v!r}", loc)
            return None
        if integer:
            if isinstance(v, float) and not v.is_integer():
                self.error(f"'{key}' must be an integer, got {v!r}", loc)
                return None
            return int(v)
        return float(v)


def _parse_native(text: str) -> GridCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError([Diagnostic(exc.msg, "syntax", exc.lineno, exc.colno)]) from None

    c = _Collector()
    if not isinstance(doc, dict):
        raise CaseError([Diagnostic("top level must be an object", "document")])
    for key in sorted(_TOP_REQUIRED - doc.keys()):
        c.error(f"missing key '{key}'", "document")
    for key in sorted(doc.keys() - _TOP_REQUIRED - _TOP_OPTIONAL):
        c.error(f"unknown key '{key}'", "document")
    if doc.get("format", NATIVE_FORMAT) != NATIVE_FORMAT:
        c.error(f"format must be '{NATIVE_FORMAT}', got {doc.get('format')!r}", "format")
    if "version" in doc and doc["version"] != NATIVE_VERSION:
        c.error(f"unsupported version {doc['version']!r}", "version")
    if c.diags:
        raise CaseError(c.diags)

    records: dict[str, list] = {}
    for section, (required, optional) in _FIELDS.items():
        items = doc[section]
        if not isinstance(items, list):
            c.error("must be an array", section)
            continue
        good = []
        for i, rec in enumerate(items):
            loc = f"{section}[{i}]"
            if not isinstance(rec, dict):
                c.error("record must be an object", loc)
                continue
            missing = required - rec.keys()
            unknown = rec.keys() - required - optional
            for key in sorted(missing):
                c.error(f"missing key '{key}'", loc)
            for key in sorted(unknown):
                c.error(f"unknown key '{key}'", loc)
            if not missing:
                good.append((loc, rec))
        records[section] = good

    buses = []
    for loc, rec in records.get("buses", []):
        bid = c.number(rec, "id", loc, integer=True)
        name = rec.get("name")
        if name is not None and not isinstance(name, str):
            c.error("'name' must be a string", loc)
            name = None
        if bid is not None:
            buses.append(Bus(bid, name))

    branches = []
    for loc, rec in records.get("branches", []):
        if rec.get("status", "on") != "on":
            c.error("initial branch status must be 'on'", loc)
        vals = [
            c.number(rec, "id", loc, integer=True),
            c.number(rec, "from", loc, integer=True),
            c.number(rec, "to", loc, integer=True),
            c.number(rec, "x_pu", loc),
            c.number(rec, "rating_mw", loc),
        ]
        if None not in vals:
            branches.append(Branch(*vals))

    generators = []
    for loc, rec in records.get("generators", []):
        bus = c.number(rec, "bus", loc, integer=True)
        pmax = c.number(rec, "p_max_mw", loc)
        pmin = c.number(rec, "p_min_mw", loc) if "p_min_mw" in rec else 0.0
        if None not in (bus, pmax, pmin):
            generators.append(Generator(bus, pmax, pmin))

    loads = []
    for loc, rec in records.get("loads", []):
        bus = c.number(rec, "bus", loc, integer=True)
        demand = c.number(rec, "demand_mw", loc)
        if None not in (bus, demand):
            loads.append(Load(bus, demand))

    base = c.number(doc, "base_mva", "base_mva")
    name = doc.get("name", "")
    if not isinstance(name, str):
        c.error("'name' must be a string", "name")
        name = ""
    if c.diags:
        raise CaseError(c.diags)
    return GridCase(tuple(buses), tuple(branches), tuple(generators), tuple(loads), base, name)


def serialize_case(case: GridCase) -> str:
    """Render ``case`` in the native format.  ``parse_case`` inverts this exactly."""

    def bus(b: Bus) -> dict:
        d: dict[str, Any] = {"id": b.id}
        if b.name is not None:
            d["name"] = b.name
        return d

    doc = {
        "format": NATIVE_FORMAT,
        "version": NATIVE_VERSION,
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [bus(b) for b in case.buses],
        "branches": [
            {"id": br.id, "from": br.from_bus, "to": br.to_bus, "x_pu": br.x_pu, "rating_mw": br.rating_mw}
            for br in case.branches
        ],
        "generators": [{"bus": g.bus, "p_max_mw": g.p_max_mw, "p_min_mw": g.p_min_mw} for g in case.generators],
        "loads": [{"bus": ld.bus, "demand_mw": ld.demand_mw} for ld in case.loads],
    }
    return json.dumps(doc, indent=1) + "\n"


# --------------------------------------------------------------------------
# MATPOWER subset
# --------------------------------------------------------------------------

_MPC_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_MPC_WANTED = ("bus", "gen", "branch")


def _parse_matpower(text: str, name: str = "") -> GridCase:
    diags: list[Diagnostic] = []
    matrices: dict[str, list[tuple[int, list[float]]]] = {}
    base_mva: float | None = None
    current: str | None = None
    row: list[float] = []
    row_line = 0

    def flush() -> None:
        nonlocal row
        if row and current is not None:
            matrices[current].append((row_line, row))
        row = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0]
        if current is None:
            m = _MPC_ASSIGN.match(line)
            if not m:
                continue
            key, rhs = m.group(1), m.group(2)
            if key == "baseMVA":
                try:
                    base_mva = float(rhs.strip().rstrip(";").strip())
                except ValueError:
                    col = raw.index(rhs) + 1
                    diags.append(Diagnostic(f"cannot parse baseMVA {rhs.strip()!r}", "baseMVA", lineno, col))
                continue
            if key not in _MPC_WANTED:
                logger.warning("matpower: ignoring mpc.%s (line %d)", key, lineno)
                continue
            start = line.find("[")
            if start < 0:
                diags.append(Diagnostic(f"expected '[' after mpc.{key} =", key, lineno, len(line) + 1))
                continue
            current = key
            matrices[key] = []
            offset = start + 1
            line = line[start + 1:]
        else:
            offset = 0
        # inside a matrix: numbers separated by whitespace/commas, rows by ';' or newline
        for tok in re.finditer(r"\]|;|[^\s,;\]]+", line):
            t = tok.group(0)
            col = offset + tok.start() + 1
            if t == "]":
                flush()
                current = None
                break
            if t == ";":
                flush()
                continue
            try:
                if not row:
                    row_line = lineno
                row.append(float(t))
            except ValueError:
                diags.append(Diagnostic(f"unexpected token {t!r}", current or "", lineno, col))
        else:
            flush()
    if current is not None:
        diags.append(Diagnostic(f"unterminated matrix mpc.{current}", current, len(text.splitlines()), 1))
    for key in _MPC_WANTED:
        if key not in matrices:
            diags.append(Diagnostic(f"missing mpc.{key}", key))
    if base_mva is None:
        diags.append(Diagnostic("missing mpc.baseMVA", "baseMVA"))
    if diags:
        raise CaseError(diags)

    def need(key: str, cols: int) -> None:
        for lineno, r in matrices[key]:
            if len(r) < cols:
                diags.append(Diagnostic(f"row has {len(r)} columns, need at least {cols}", key, lineno, 1))

    need("bus", 3)
    need("gen", 10)
    need("branch", 11)
    if diags:
        raise CaseError(diags)

    buses, loads = [], []
    for _, r in matrices["bus"]:
        bid = int(r[0])
        buses.append(Bus(bid))
        if r[2] != 0:
            loads.append(Load(bid, r[2]))
    generators = []
    for lineno, r in matrices["gen"]:
        if r[7] <= 0:
            logger.warning("matpower: skipping out-of-service generator at bus %d (line %d)", int(r[0]), lineno)
            continue
        generators.append(Generator(int(r[0]), r[8], 0.0))
    branches = []
    for row_no, (lineno, r) in enumerate(matrices["branch"], start=1):
        if r[10] <= 0:
            logger.warning("matpower: skipping out-of-service branch %d (line %d)", row_no, lineno)
            continue
        branches.append(Branch(row_no, int(r[0]), int(r[1]), r[3], r[5]))
    return GridCase(tuple(buses), tuple(branches), tuple(generators), tuple(loads), base_mva, name)


# --------------------------------------------------------------------------
# entry points
# --------------------------------------------------------------------------


def parse_case(text: str, format: str = "native", name: str = "") -> GridCase:
    """Parse and validate a case.  Raises :class:`CaseError` with diagnostics."""
    if not text or not text.strip():
        raise CaseError([Diagnostic("empty case text", "document")])
    if format == "native":
        case = _parse_native(text)
    elif format == "matpower":
        case = _parse_matpower(text, name)
    else:
        raise ValueError(f"unknown case format {format!r}")
    diags = validate_case(case)
    if diags:
        raise CaseError(diags)
    return case


def load_case(path: str | Path, format: str | None = None) -> GridCase:
    """Read a case file; the format defaults to ``matpower`` for ``.m`` files."""
    path = Path(path)
    if format is None:
        format = "matpower" if path.suffix == ".m" else "native"
    return parse_case(path.read_text(), format, name=path.stem)


def case_hash(case: GridCase) -> str:
    """SHA-256 of the canonical native serialization."""
    return hashlib.sha256(serialize_case(case).encode()).hexdigest()


def builtin_case_path(name: str) -> Path:
    """Path of a case file shipped in ``cascade_risk/data``."""
    return Path(__file__).parent / "data" / name
