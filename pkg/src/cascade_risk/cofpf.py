"""Component failure probability functions (CoFPFs).

A CoFPF maps a component's working condition ``s`` (here the branch load
ratio ``|flow| / rating``) to the probability that the component fails during
the current stage.  Two forms are provided, both parameterised by
``(p_min, p_max, s_d, s_u)``:

``piecewise-linear``
    ``p_min`` below ``s_d``, linear between ``(s_d, p_min)`` and ``(s_u, p_max)``,
    ``p_max`` above ``s_u``.

``exponential-blend``
    ``max(piecewise(s), p_min * exp(b * s))`` below ``s_u`` with
    ``b = ln(p_max / p_min) / s_u``, and ``p_max`` from ``s_u`` on.

Results are clamped to ``[1e-12, 1 - 1e-12]`` so log-probabilities stay finite.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .errors import DataError
from .power_flow import FlowState

PROB_FLOOR = 1e-12
PROB_CEIL = 1.0 - 1e-12

SPEC_FORMAT = "cofpf-set"
SPEC_VERSION = 1


class Form(str, Enum):
    PIECEWISE = "piecewise-linear"
    EXPONENTIAL = "exponential-blend"


_FORM_CODE = {Form.PIECEWISE: 0, Form.EXPONENTIAL: 1}


class CoFPFError(DataError):
    """Invalid CoFPF parameters or spec file."""


@dataclass(frozen=True)
class CoFPF:
    form: Form
    p_min: float
    p_max: float
    s_d: float
    s_u: float

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "form", Form(self.form))
        except ValueError:
            raise CoFPFError(f"unknown CoFPF form {self.form!r}") from None
        for name in ("p_min", "p_max", "s_d", "s_u"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise CoFPFError(f"{name} must be a finite number, got {v!r}")
            object.__setattr__(self, name, float(v))
        if not 0.0 < self.p_min < self.p_max < 1.0:
            raise CoFPFError(f"need 0 < p_min < p_max < 1, got p_min={self.p_min}, p_max={self.p_max}")
        if not 0.0 <= self.s_d < self.s_u:
            raise CoFPFError(f"need 0 <= s_d < s_u, got s_d={self.s_d}, s_u={self.s_u}")

    @property
    def exp_rate(self) -> float:
        return math.log(self.p_max / self.p_min) / self.s_u

    def __call__(self, s: float) -> float:
        """Failure probability at load ratio ``s``."""
        # same operation order as CoFPFSet.evaluate
        t = min(max((s - self.s_d) * (1.0 / (self.s_u - self.s_d)), 0.0), 1.0)
        p = self.p_min + (self.p_max - self.p_min) * t
        if s >= self.s_u:
            p = self.p_max  # exact, where p_min + (p_max - p_min) may be off by an ulp
        elif self.form is Form.EXPONENTIAL:
            p = max(p, self.p_min * math.exp(self.exp_rate * s))
        return min(max(p, PROB_FLOOR), PROB_CEIL)

    def evaluate(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        k = np.zeros(s.shape, dtype=np.intp)
        return CoFPFSet([self]).evaluate(k, s)

    def with_pmin(self, p_min: float) -> CoFPF:
        return replace(self, p_min=p_min)

    def with_form(self, form: Form | str) -> CoFPF:
        return replace(self, form=Form(form))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["form"] = self.form.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CoFPF:
        unknown = set(d) - {"form", "p_min", "p_max", "s_d", "s_u"}
        if unknown:
            raise CoFPFError(f"unknown CoFPF keys {sorted(unknown)}")
        try:
            return cls(d.get("form", Form.PIECEWISE.value), d["p_min"], d["p_max"], d["s_d"], d["s_u"])
        except KeyError as exc:
            raise CoFPFError(f"missing CoFPF key {exc.args[0]!r}") from None


class CoFPFSet(Sequence):
    """One CoFPF per component, with parameter arrays for vectorised evaluation."""

    def __init__(self, cofpfs: Sequence[CoFPF]):
        self._items = tuple(cofpfs)
        for i, f in enumerate(self._items):
            if not isinstance(f, CoFPF):
                raise TypeError(f"component {i}: expected CoFPF, got {type(f).__name__}")
        self.form_code = self._frozen([_FORM_CODE[f.form] for f in self._items], np.intp)
        self.p_min = self._frozen([f.p_min for f in self._items])
        self.p_max = self._frozen([f.p_max for f in self._items])
        self.s_d = self._frozen([f.s_d for f in self._items])
        self.s_u = self._frozen([f.s_u for f in self._items])
        # rows: s_d, 1/(s_u - s_d), p_min, p_max - p_min; gathered together in evaluate
        self._lin = self._frozen(
            np.stack([self.s_d, 1.0 / (self.s_u - self.s_d), self.p_min, self.p_max - self.p_min])
            if self._items else np.zeros((4, 0))
        )
        self._rate = self._frozen([f.exp_rate for f in self._items])
        self._any_expo = bool(self.form_code.any())

    @staticmethod
    def _frozen(values: Any, dtype: Any = float) -> np.ndarray:
        a = np.array(values, dtype=dtype)
        a.flags.writeable = False
        return a

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, k):  # type: ignore[override]
        return self._items[k]

    def __iter__(self) -> Iterator[CoFPF]:
        return iter(self._items)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CoFPFSet) and self._items == other._items

    def __hash__(self) -> int:
        return hash(self._items)

    def __repr__(self) -> str:
        return f"CoFPFSet(k_a={len(self)})"

    def evaluate(self, components: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Failure probability of ``components[i]`` at load ratio ``s[i]``."""
        k = np.asarray(components, dtype=np.intp)
        s = np.asarray(s, dtype=float)
        g = np.take(self._lin, k, axis=1)
        p = s - g[0]
        p *= g[1]
        np.clip(p, 0.0, 1.0, out=p)
        p *= g[3]
        p += g[2]
        if self._any_expo:
            ex = np.flatnonzero(self.form_code[k])
            ke, se = k[ex], s[ex]
            # rows at or above s_u are overwritten below; clamping keeps exp finite
            p[ex] = np.maximum(p[ex], self.p_min[ke] * np.exp(self._rate[ke] * np.minimum(se, self.s_u[ke])))
        top = np.flatnonzero(s >= self.s_u[k])
        p[top] = self.p_max[k[top]]
        return np.clip(p, PROB_FLOOR, PROB_CEIL, out=p)

    def replace(self, changes: Mapping[int, CoFPF]) -> CoFPFSet:
        items = list(self._items)
        for k, f in changes.items():
            if not 0 <= k < len(items):
                raise IndexError(f"component {k} out of range [0, {len(items)})")
            items[k] = f
        return CoFPFSet(items)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": SPEC_FORMAT,
            "version": SPEC_VERSION,
            "k_a": len(self),
            "components": [f.to_dict() for f in self._items],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], k_a: int | None = None) -> CoFPFSet:
        """Build a set from a spec document.

        Two layouts are accepted: an explicit ``components`` list, or a
        ``default`` CoFPF plus ``overrides`` keyed by component index whose
        values replace some or all of the default's fields.
        """
        if doc.get("format", SPEC_FORMAT) != SPEC_FORMAT:
            raise CoFPFError(f"not a CoFPF spec: format={doc.get('format')!r}")
        if doc.get("version", SPEC_VERSION) != SPEC_VERSION:
            raise CoFPFError(f"unsupported CoFPF spec version {doc.get('version')!r}")
        n = doc.get("k_a", k_a)
        if k_a is not None and n != k_a:
            raise CoFPFError(f"spec is for k_a={n}, case has k_a={k_a}")
        if "components" in doc:
            items = [CoFPF.from_dict(d) for d in doc["components"]]
            if n is not None and len(items) != n:
                raise CoFPFError(f"spec lists {len(items)} components, expected {n}")
            return cls(items)
        if "default" not in doc:
            raise CoFPFError("spec needs either 'components' or 'default'")
        if n is None:
            raise CoFPFError("'default' spec needs k_a (in the file or from the case)")
        default = CoFPF.from_dict(doc["default"])
        items = [default] * n
        for key, override in doc.get("overrides", {}).items():
            k = int(key)
            if not 0 <= k < n:
                raise CoFPFError(f"override for component {k} out of range [0, {n})")
            items[k] = CoFPF.from_dict({**default.to_dict(), **override})
        return cls(items)


def load_cofpf_spec(path: str | Path, k_a: int | None = None) -> CoFPFSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CoFPFError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return CoFPFSet.from_dict(doc, k_a)


def uniform_pmin_cofpfs(
    k_a: int,
    seed: int,
    p_min_range: tuple[float, float] = (0.002, 0.006),
    p_max: float = 0.9995,
    s_d: float = 0.97,
    s_u: float = 1.3,
    form: Form = Form.PIECEWISE,
) -> CoFPFSet:
    """Piecewise-linear CoFPFs with ``p_min`` drawn i.i.d. uniform from ``p_min_range``.

    The defaults make components nearly failure-proof below 97% loading and
    almost certain to trip above 130%.
    """
    rng = np.random.default_rng(seed)
    lo, hi = p_min_range
    p_mins = rng.uniform(lo, hi, size=k_a)
    return CoFPFSet([CoFPF(form, float(p), p_max, s_d, s_u) for p in p_mins])


def uniform_cofpfs(k_a: int, cofpf: CoFPF) -> CoFPFSet:
    return CoFPFSet([cofpf] * k_a)


# --------------------------------------------------------------------------
# working condition
# --------------------------------------------------------------------------


def condition(flow_state: FlowState, component: int) -> float:
    """Load ratio ``|flow| / rating`` of an ON component."""
    if not flow_state.on[component]:
        raise ValueError(f"component {component} is OFF; its condition is undefined")
    return abs(float(flow_state.flow_mw[component])) / float(flow_state.rating_mw[component])


def load_ratios(flow_state: FlowState, components: np.ndarray) -> np.ndarray:
    """Vectorised :func:`condition` for ON components."""
    components = np.asarray(components, dtype=np.intp)
    if not flow_state.on[components].all():
        raise ValueError("load ratio requested for an OFF component")
    return np.abs(flow_state.flow_mw[components]) / flow_state.rating_mw[components]
