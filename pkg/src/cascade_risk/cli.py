"""Command-line interface.

    cascade-risk simulate --case CASE -n N --seed S --out ARCHIVE [--cofpf SPEC] [--y0 ...]
    cascade-risk risk     --archive ARCHIVE --y0 0,100 [--delta-pmin X --components 1,2] [--alpha 0.9]
    cascade-risk sweep    --archive ARCHIVE --mode singles,pairs --delta-pmin 0.001 --y0 0,20 [--out CSV]
    cascade-risk oracle   --case CASE [--cofpf SPEC] [--y0 ...]

Results go to stdout (or ``--out``); diagnostics, progress and timings go to
stderr.  Exit status: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence, TextIO

from . import __version__
from .archive import read_archive, write_archive
from .cascade_sim import SimulationError, default_workers, run_batch
from .cofpf import CoFPFSet, Form, load_cofpf_spec, uniform_pmin_cofpfs
from .errors import DataError, NumericalError
from .grid_model import CaseError, GridCase, builtin_case_path, case_hash, load_case
from .oracle import MAX_COMPONENTS, enumerate_paths
from .risk_engine import Scenario, cvar, estimate_risk, reweighted_risk, weights
from .sweep import MODES, Mutation, load_scenarios, run_sweep

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
VERBS = ("simulate", "risk", "sweep", "oracle")

log = logging.getLogger("cascade_risk")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    verb: str
    case: str | None = None
    case_format: str | None = None
    load_factor: float = 1.0
    cofpf: str | None = None
    pmin_seed: int = 0
    archive: str | None = None
    n: int | None = None
    seed: int | None = None
    y0: list[float] = field(default_factory=list)
    mode: list[str] = field(default_factory=list)
    delta_pmin: float | None = None
    to_form: str | None = None
    components: list[int] = field(default_factory=list)
    scenarios: str | None = None
    new_cofpf: str | None = None
    baseline: str | None = None
    alpha: list[float] = field(default_factory=list)
    out: str | None = None
    output_format: str = "csv"
    workers: int = 1
    initial_outage: list[int] = field(default_factory=list)
    max_components: int = MAX_COMPONENTS
    sort: bool = False
    quiet: bool = False

    def validate(self) -> None:
        """Verb-specific checks that need no I/O."""
        need = {
            "simulate": ("case", "n", "seed", "archive"),
            "risk": ("archive",),
            "sweep": ("archive",),
            "oracle": ("case",),
        }[self.verb]
        flag = {"case": "--case", "n": "-n", "seed": "--seed", "archive": "--out" if self.verb == "simulate" else "--archive"}
        for name in need:
            if getattr(self, name) is None:
                raise UsageError(f"{self.verb}: {flag[name]} is required")
        if self.n is not None and self.n < 1:
            raise UsageError("-n must be >= 1")
        if self.load_factor <= 0:
            raise UsageError("--load-factor must be > 0")
        if self.workers < 1:
            raise UsageError("--workers must be >= 1")
        if any(not 0.0 < a < 1.0 for a in self.alpha):
            raise UsageError("--alpha values must lie in (0, 1)")
        if self.delta_pmin is not None and self.to_form is not None:
            raise UsageError("--delta-pmin and --to-form are mutually exclusive")
        if self.verb == "risk":
            if self.new_cofpf and (self.delta_pmin is not None or self.to_form):
                raise UsageError("risk: use either --new-cofpf or a mutation, not both")
            if (self.delta_pmin is not None or self.to_form) and not self.components:
                raise UsageError("risk: a mutation needs --components")
            if self.components and self.delta_pmin is None and not self.to_form:
                raise UsageError("risk: --components needs --delta-pmin or --to-form")
            if not self.y0 and not self.alpha:
                raise UsageError("risk: give --y0 and/or --alpha")
        if self.verb == "sweep":
            if not self.y0:
                raise UsageError("sweep: --y0 is required")
            if not self.mode or any(m not in MODES for m in self.mode):
                raise UsageError(f"sweep: --mode must be a comma list from {MODES}")
            if "from-file" in self.mode:
                if len(self.mode) > 1:
                    raise UsageError("sweep: from-file cannot be combined with other modes")
                if not self.scenarios:
                    raise UsageError("sweep: --mode from-file needs --scenarios")
            elif self.delta_pmin is None and not self.to_form:
                raise UsageError("sweep: give --delta-pmin or --to-form")


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _words(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _form(text: str) -> str:
    aliases = {"exponential": Form.EXPONENTIAL.value, "piecewise": Form.PIECEWISE.value}
    value = aliases.get(text, text)
    if value not in {f.value for f in Form}:
        raise argparse.ArgumentTypeError(f"unknown form {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cascade-risk", description="Cascading-blackout sampling and risk reweighting.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def case_args(sp: argparse.ArgumentParser, required: bool) -> None:
        sp.add_argument("--case", required=required, help="case file, or builtin:NAME for a bundled case")
        sp.add_argument("--format", dest="case_format", choices=("native", "matpower"))
        sp.add_argument("--load-factor", type=float, default=1.0, help="scale every load (default 1)")

    def cofpf_args(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--cofpf", help="CoFPF spec file (default: generated, see --pmin-seed)")
        sp.add_argument("--pmin-seed", type=int, default=0,
                        help="seed for the default CoFPFs (p_min ~ U[0.002, 0.006])")

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("-q", "--quiet", action="store_true", help="no progress or timing on stderr")

    s = sub.add_parser("simulate", help="sample cascades into an archive")
    case_args(s, True)
    cofpf_args(s)
    s.add_argument("-n", type=int, required=True, help="number of samples")
    s.add_argument("--seed", type=int, required=True, help="master seed")
    s.add_argument("--out", dest="archive", required=True, help="archive path (.gz compresses)")
    s.add_argument("--y0", type=_floats, default=[0.0], help="thresholds for the summary (MW)")
    s.add_argument("--workers", type=int, default=None, help="processes (default $CASCADE_RISK_WORKERS or cores)")
    s.add_argument("--initial-outage", type=_ints, default=[], help="branch indices out at stage 0")
    common(s)

    r = sub.add_parser("risk", help="risk estimates from an archive, optionally reweighted")
    r.add_argument("--archive", required=True)
    r.add_argument("--y0", type=_floats, default=[])
    r.add_argument("--alpha", type=_floats, default=[], help="VaR/CVaR levels")
    r.add_argument("--new-cofpf", help="CoFPF spec of the changed system")
    r.add_argument("--components", type=_ints, default=[], help="components the mutation applies to")
    r.add_argument("--delta-pmin", type=float, help="lower p_min by this amount")
    r.add_argument("--to-form", type=_form, help="switch to this CoFPF form")
    r.add_argument("--baseline", help="CoFPF spec the archive must have been generated under")
    r.add_argument("--case", help="case file to compare with the archive's case hash")
    r.add_argument("--format", dest="case_format", choices=("native", "matpower"))
    r.add_argument("--load-factor", type=float, default=1.0)
    r.add_argument("--json", dest="output_format", action="store_const", const="json", default="csv")
    r.add_argument("--out")
    common(r)

    w = sub.add_parser("sweep", help="risk change over many scenarios")
    w.add_argument("--archive", required=True)
    w.add_argument("--mode", type=_words, required=True, help="singles, pairs, singles,pairs or from-file")
    w.add_argument("--scenarios", help="scenario file for --mode from-file")
    w.add_argument("--delta-pmin", type=float)
    w.add_argument("--to-form", type=_form)
    w.add_argument("--y0", type=_floats, required=True)
    w.add_argument("--sort", action="store_true", help="order rows by change ratio, largest first")
    w.add_argument("--json", dest="output_format", action="store_const", const="json", default="csv")
    w.add_argument("--out")
    common(w)

    o = sub.add_parser("oracle", help="exact path enumeration for tiny cases")
    case_args(o, True)
    cofpf_args(o)
    o.add_argument("--y0", type=_floats, default=[0.0])
    o.add_argument("--max-components", type=int, default=MAX_COMPONENTS)
    o.add_argument("--initial-outage", type=_ints, default=[])
    o.add_argument("--out")
    common(o)
    return p


def parse_config(argv: Sequence[str]) -> RunConfig:
    ns = build_parser().parse_args(list(argv))
    d = vars(ns)
    if d.get("workers") is None:
        d["workers"] = default_workers()
    known = set(RunConfig.__dataclass_fields__)
    cfg = RunConfig(**{k: v for k, v in d.items() if k in known})
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------


class Progress:
    """Rate-limited progress lines on stderr."""

    def __init__(self, label: str, stream: TextIO, interval: float = 1.0, enabled: bool = True):
        self.label, self.stream, self.interval, self.enabled = label, stream, interval, enabled
        self._t0 = self._last = time.monotonic()

    def __call__(self, done: int, total: int) -> None:
        now = time.monotonic()
        if self.enabled and now - self._last >= self.interval and done < total:
            self._last = now
            self.stream.write(f"{self.label}: {done}/{total} ({now - self._t0:.1f} s)\n")
            self.stream.flush()


def _load_case(cfg: RunConfig) -> GridCase:
    assert cfg.case is not None
    path = builtin_case_path(cfg.case[len("builtin:"):]) if cfg.case.startswith("builtin:") else Path(cfg.case)
    case = load_case(path, cfg.case_format)
    return case.scaled(cfg.load_factor) if cfg.load_factor != 1.0 else case


def _cofpfs(cfg: RunConfig, k_a: int) -> CoFPFSet:
    if cfg.cofpf:
        return load_cofpf_spec(cfg.cofpf, k_a)
    return uniform_pmin_cofpfs(k_a, cfg.pmin_seed)


def _num(v: float) -> str:
    return repr(float(v))


def _emit(text: str, out: str | None, stdout: TextIO) -> None:
    if out:
        Path(out).write_text(text)
    else:
        stdout.write(text)


def _simulate(cfg: RunConfig, stdout: TextIO, stderr: TextIO) -> int:
    case = _load_case(cfg)
    cofpfs = _cofpfs(cfg, case.k_a)
    t0 = time.perf_counter()
    archive = run_batch(
        case, cofpfs, cfg.n, cfg.seed, workers=cfg.workers, initial_outage=cfg.initial_outage,
        progress=Progress("simulate", stderr, enabled=not cfg.quiet),
    )
    nbytes = write_archive(archive, cfg.archive)
    wall = time.perf_counter() - t0
    summary = {
        "n": len(archive),
        "mean_y_mw": float(archive.y_mw.mean()),
        "risk": [
            {"y0_mw": e.y0_mw, "risk_mw": e.value, "stderr_mw": e.stderr}
            for e in (estimate_risk(archive, y0) for y0 in cfg.y0)
        ],
        "archive": cfg.archive,
        "bytes": nbytes,
    }
    stdout.write(json.dumps(summary) + "\n")
    if not cfg.quiet:
        stderr.write(f"simulate: wall time {wall:.3f} s\n")
    return EXIT_OK


def _mutation(cfg: RunConfig) -> Mutation | None:
    if cfg.delta_pmin is not None:
        return Mutation(delta_pmin=cfg.delta_pmin)
    if cfg.to_form:
        return Mutation(to_form=Form(cfg.to_form))
    return None


def _risk(cfg: RunConfig, stdout: TextIO, stderr: TextIO) -> int:
    baseline = load_cofpf_spec(cfg.baseline) if cfg.baseline else None
    case_sha = case_hash(_load_case(cfg)) if cfg.case else None
    archive = read_archive(cfg.archive, baseline=baseline, case_sha256=case_sha)
    base = archive.cofpfs
    scenario = None
    if cfg.new_cofpf:
        new = load_cofpf_spec(cfg.new_cofpf, archive.k_a)
        scenario = Scenario({k: f for k, f in enumerate(new) if f != base[k]}, "new-cofpf")
    elif cfg.components:
        mut = _mutation(cfg)
        assert mut is not None
        for k in cfg.components:
            if not 0 <= k < archive.k_a:
                raise UsageError(f"component {k} out of range [0, {archive.k_a})")
        scenario = Scenario({k: mut.apply(base[k]) for k in cfg.components}, mut.label)

    w = weights(archive, scenario) if scenario is not None else None
    ests = [reweighted_risk(archive, scenario, y0, w=w) if w is not None else estimate_risk(archive, y0)
            for y0 in cfg.y0]
    cvars = [cvar(archive, a, w) for a in cfg.alpha]
    for e in ests:
        if e.low_ess:
            stderr.write(f"warning: effective sample size {e.ess:.1f} is below 1% of N={e.n}\n")

    if cfg.output_format == "json":
        doc: dict[str, Any] = {
            "scenario": None if scenario is None else {
                "label": scenario.label, "components": list(scenario.components),
                "cofpfs": {str(k): f.to_dict() for k, f in scenario.changes.items()},
            },
            "estimates": [e.to_dict() for e in ests],
            "cvar": [{"alpha": c.alpha, "var_mw": c.var_mw, "cvar_mw": c.cvar_mw, "alpha_hat": c.alpha_hat}
                     for c in cvars],
        }
        _emit(json.dumps(doc, indent=1) + "\n", cfg.out, stdout)
        return EXIT_OK
    lines = []
    if ests:
        lines.append("y0_mw,risk_mw,stderr_mw,ess,n,w_min,w_max,w_mean,low_ess")
        for e in ests:
            lines.append(",".join([_num(e.y0_mw), _num(e.value), _num(e.stderr), _num(e.ess), str(e.n),
                                   _num(e.w_min), _num(e.w_max), _num(e.w_mean), str(e.low_ess).lower()]))
    if cvars:
        if lines:
            lines.append("")
        lines.append("alpha,var_mw,cvar_mw,alpha_hat")
        lines += [",".join(map(_num, (c.alpha, c.var_mw, c.cvar_mw, c.alpha_hat))) for c in cvars]
    _emit("\n".join(lines) + "\n", cfg.out, stdout)
    return EXIT_OK


def _sweep(cfg: RunConfig, stdout: TextIO, stderr: TextIO) -> int:
    archive = read_archive(cfg.archive)
    mutation = _mutation(cfg)
    scenarios = load_scenarios(cfg.scenarios, archive.k_a) if cfg.mode == ["from-file"] else None
    report = run_sweep(archive, cfg.mode, mutation, cfg.y0, scenarios)
    if cfg.sort:
        report.rows = report.sorted_by_ratio()
    if cfg.output_format == "json":
        doc = report.to_dict()
        del doc["timing"]  # kept off the result stream so reruns are byte-identical
        _emit(json.dumps(doc, indent=1) + "\n", cfg.out, stdout)
    else:
        _emit(report.to_csv(), cfg.out, stdout)
    if not cfg.quiet:
        stderr.write("sweep timing: " + json.dumps({k: round(v, 6) for k, v in report.timing.items()}) + "\n")
    n_err = sum(1 for r in report.rows if r.error)
    if n_err:
        stderr.write(f"sweep: {n_err} row(s) carry errors\n")
    return EXIT_OK


def _oracle(cfg: RunConfig, stdout: TextIO, stderr: TextIO) -> int:
    case = _load_case(cfg)
    cofpfs = _cofpfs(cfg, case.k_a)
    if cfg.max_components > MAX_COMPONENTS:
        raise UsageError(f"--max-components is capped at {MAX_COMPONENTS}")
    enum = enumerate_paths(case, cofpfs, cfg.max_components, cfg.initial_outage)
    doc = {"case_sha256": case_hash(case), "cofpf": cofpfs.to_dict(), **enum.to_dict(cfg.y0)}
    _emit(json.dumps(doc, indent=1) + "\n", cfg.out, stdout)
    return EXIT_OK


def run(cfg: RunConfig, stdout: TextIO | None = None, stderr: TextIO | None = None) -> int:
    """Execute a validated config; returns the exit status."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    verbs = {"simulate": _simulate, "risk": _risk, "sweep": _sweep, "oracle": _oracle}
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            status = verbs[cfg.verb](cfg, stdout, stderr)
        for wrn in caught:
            stderr.write(f"warning: {wrn.message}\n")
        return status
    except UsageError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except CaseError as exc:
        stderr.write("error: invalid case\n" + "".join(f"  {d}\n" for d in exc.diagnostics))
        return EXIT_DATA
    except BrokenPipeError:
        raise
    except (DataError, OSError) as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except SimulationError as exc:
        stderr.write(f"error: numerical failure in sample {exc.index}: {exc.cause}\n")
        return EXIT_NUMERICAL
    except NumericalError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_NUMERICAL
    except ValueError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


def main(argv: Sequence[str] | None = None, stdout: TextIO | None = None, stderr: TextIO | None = None) -> int:
    stderr = stderr or sys.stderr
    handler = logging.StreamHandler(stderr)
    handler.setFormatter(logging.Formatter("warning: %(message)s"))
    log.addHandler(handler)
    propagate, log.propagate = log.propagate, False
    try:
        try:
            cfg = parse_config(sys.argv[1:] if argv is None else argv)
        except UsageError as exc:
            stderr.write(f"error: {exc}\n")
            return EXIT_USAGE
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        try:
            return run(cfg, stdout, stderr)
        except BrokenPipeError:
            # reader went away (e.g. piped into head); silence the flush at exit
            try:
                sys.stdout = open(os.devnull, "w")
            except OSError:
                pass
            return EXIT_OK
    finally:
        log.removeHandler(handler)
        log.propagate = propagate
