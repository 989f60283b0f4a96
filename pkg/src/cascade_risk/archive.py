"""Sample archives: simulate once, reweight many times.

File layout (UTF-8, one JSON document per line, optionally gzip-framed --
detected by the ``1f 8b`` magic bytes on read):

* line 1: header ``{"format": "cascade-archive", "version": "1.0", "case_sha256", "cofpf",
  "cofpf_sha256", "master_seed", "n_samples", "k_a", "initial_outage", "created"}``
* lines 2..N+1: one record per sample, in sample order::

      {"i": 0, "n": 1, "y_mw": 12.5,
       "stages": [{"failed": [3], "cond": [[0, 0.41], [1, 0.87], ...]}, ...],
       "log_gamma": [...k_a values...], "log_g": -0.123}

Stage ``j`` of a record is the ``j``-th draw round; ``cond`` lists every
component alive at that round with its load ratio.  Floats are written with
``repr`` precision, so values read back are bit-identical.
"""

from __future__ import annotations

import gzip
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Sequence

import numpy as np

from .cofpf import CoFPFSet
from .errors import DataError
from .records import CascadeSample, ConditionTable

FORMAT = "cascade-archive"
VERSION = "1.0"
GZIP_MAGIC = b"\x1f\x8b"
LOG_G_TOL = 1e-10


class ArchiveError(DataError):
    """Unreadable, inconsistent or corrupted archive."""


class ArchiveMismatchError(ArchiveError):
    """Archive was generated under different CoFPFs than the caller's baseline."""


class CaseMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ArchiveHeader:
    case_sha256: str
    cofpf: dict[str, Any]
    cofpf_sha256: str
    master_seed: int
    n_samples: int
    k_a: int
    initial_outage: tuple[int, ...] = ()
    created: dict[str, Any] = field(default_factory=dict)
    format: str = FORMAT
    version: str = VERSION

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["initial_outage"] = list(self.initial_outage)
        order = ["format", "version", "case_sha256", "cofpf_sha256", "master_seed", "n_samples", "k_a",
                 "initial_outage", "created", "cofpf"]
        return {k: d[k] for k in order}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ArchiveHeader:
        if d.get("format") != FORMAT:
            raise ArchiveError(f"not a sample archive (format={d.get('format')!r})")
        version = str(d.get("version", ""))
        if version.split(".")[0] != VERSION.split(".")[0]:
            raise ArchiveError(f"archive version {version} is incompatible with reader version {VERSION}")
        try:
            return cls(
                case_sha256=d["case_sha256"], cofpf=d["cofpf"], cofpf_sha256=d["cofpf_sha256"],
                master_seed=int(d["master_seed"]), n_samples=int(d["n_samples"]), k_a=int(d["k_a"]),
                initial_outage=tuple(d.get("initial_outage", ())), created=dict(d.get("created", {})),
                version=version,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveError(f"bad archive header: {exc!r}") from None


class SampleArchive:
    """N cascade samples in columnar form, plus the cached baseline log-Gamma matrix."""

    def __init__(
        self,
        header: ArchiveHeader,
        y_mw: np.ndarray,
        table: ConditionTable,
        log_gamma: np.ndarray,
        log_g: np.ndarray | None = None,
    ):
        self.header = header
        self.y_mw = _readonly(np.asarray(y_mw, dtype=float))
        self.table = table
        self.log_gamma = _readonly(np.asarray(log_gamma, dtype=float).reshape(len(self.y_mw), header.k_a))
        self.log_g = _readonly(self.log_gamma.sum(axis=1) if log_g is None else np.asarray(log_g, dtype=float))

    @classmethod
    def from_samples(cls, header: ArchiveHeader, samples: Sequence[CascadeSample]) -> SampleArchive:
        from .records import table_from_samples

        table = table_from_samples(list(samples))
        k_a = header.k_a
        lg = np.array([s.log_gamma for s in samples], dtype=float).reshape(len(samples), k_a)
        return cls(header, np.array([s.y_mw for s in samples]), table, lg, np.array([s.log_g for s in samples]))

    def __len__(self) -> int:
        return len(self.y_mw)

    @property
    def n_samples(self) -> int:
        return len(self.y_mw)

    @property
    def k_a(self) -> int:
        return self.header.k_a

    @cached_property
    def cofpfs(self) -> CoFPFSet:
        """The CoFPFs the samples were generated under."""
        return CoFPFSet.from_dict(self.header.cofpf)

    @cached_property
    def n_failure_stages(self) -> np.ndarray:
        """Cascade length of every sample."""
        t = self.table
        if not t.failed.any():
            return np.zeros(self.n_samples, int)
        width = int(t.stage.max()) + 1
        pairs = np.unique(t.sample[t.failed] * width + t.stage[t.failed])
        return np.bincount(pairs // width, minlength=self.n_samples)

    def __getitem__(self, i: int) -> CascadeSample:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        return CascadeSample(i, self.table.stages_of(i), float(self.y_mw[i]), self.log_gamma[i], float(self.log_g[i]))

    def __iter__(self) -> Iterator[CascadeSample]:
        for i in range(len(self)):
            yield self[i]

    def check_baseline(self, baseline: CoFPFSet) -> None:
        """Raise unless ``baseline`` is exactly the CoFPF set the archive was generated under."""
        if baseline.fingerprint() != self.header.cofpf_sha256:
            raise ArchiveMismatchError(
                "baseline CoFPFs differ from the ones the archive was generated under "
                f"(archive {self.header.cofpf_sha256[:12]}, supplied {baseline.fingerprint()[:12]})"
            )

    def validate(self) -> None:
        """Check all archive invariants; raise :class:`ArchiveError` on the first violation."""
        h, t = self.header, self.table
        if h.n_samples != len(self):
            raise ArchiveError(f"header says {h.n_samples} samples, body has {len(self)}")
        if t.n_samples != len(self):
            raise ArchiveError("condition table sample count differs from body")
        if len(t):
            if t.comp.min() < 0 or t.comp.max() >= h.k_a:
                raise ArchiveError(f"component id outside [0, {h.k_a})")
            if np.any(np.diff(t.sample) < 0) or t.sample.min() < 0 or t.sample.max() >= len(self):
                raise ArchiveError("condition rows out of sample order")
            # a component fails at most once per sample
            key = t.sample[t.failed] * h.k_a + t.comp[t.failed]
            if len(np.unique(key)) != len(key):
                bad = int(np.flatnonzero(np.bincount(key) > 1)[0]) // h.k_a
                raise ArchiveError(f"record {bad}: component fails more than once")
            # a component never reappears after failing
            fail_stage = np.full((len(self), h.k_a), np.iinfo(np.int32).max, dtype=np.int64)
            fail_stage[t.sample[t.failed], t.comp[t.failed]] = t.stage[t.failed]
            later = t.stage > fail_stage[t.sample, t.comp]
            if later.any():
                raise ArchiveError(f"record {int(t.sample[later][0])}: failed component listed alive later")
        if np.any(self.y_mw < 0) or not np.all(np.isfinite(self.y_mw)):
            raise ArchiveError("load shed must be finite and >= 0")
        gap = np.abs(self.log_g - self.log_gamma.sum(axis=1))
        bad = gap > LOG_G_TOL * np.maximum(1.0, np.abs(self.log_g))
        if bad.any():
            raise ArchiveError(f"record {int(np.flatnonzero(bad)[0])}: log_g differs from the log-Gamma row sum")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


# --------------------------------------------------------------------------
# writing
# --------------------------------------------------------------------------


def _records(archive: SampleArchive) -> Iterator[dict[str, Any]]:
    t = archive.table
    bounds = t.sample_bounds.tolist()
    stage, comp, s, failed = t.stage.tolist(), t.comp.tolist(), t.s.tolist(), t.failed.tolist()
    y, lg, log_g = archive.y_mw.tolist(), archive.log_gamma.tolist(), archive.log_g.tolist()
    for i in range(len(archive)):
        stages: list[dict[str, Any]] = []
        last = -1
        for r in range(bounds[i], bounds[i + 1]):
            if stage[r] != last:
                stages.append({"failed": [], "cond": []})
                last = stage[r]
            stages[-1]["cond"].append([comp[r], s[r]])
            if failed[r]:
                stages[-1]["failed"].append(comp[r])
        n = sum(1 for st in stages if st["failed"])
        yield {"i": i, "n": n, "y_mw": y[i], "stages": stages, "log_gamma": lg[i], "log_g": log_g[i]}


def write_archive(archive: SampleArchive, sink: str | Path | IO[bytes], compress: bool | None = None) -> int:
    """Write ``archive`` to a path or binary stream; return the number of bytes written.

    Paths ending in ``.gz`` are compressed unless ``compress`` says otherwise.
    Output is byte-deterministic for identical archives (gzip mtime is fixed).
    """
    if archive.header.n_samples != len(archive):
        raise ArchiveError(f"header says {archive.header.n_samples} samples, body has {len(archive)}")
    if compress is None:
        compress = isinstance(sink, (str, Path)) and str(sink).endswith(".gz")
    buf = io.BytesIO()
    out: IO[bytes] = gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) if compress else buf
    dumps = json.JSONEncoder(separators=(",", ":"), allow_nan=False).encode
    out.write(dumps(archive.header.to_dict()).encode() + b"\n")
    for rec in _records(archive):
        out.write(dumps(rec).encode() + b"\n")
    if compress:
        out.close()
    data = buf.getvalue()
    try:
        if isinstance(sink, (str, Path)):
            Path(sink).write_bytes(data)
        else:
            sink.write(data)
    except OSError as exc:
        raise ArchiveError(f"cannot write archive: {exc}") from exc
    return len(data)


# --------------------------------------------------------------------------
# reading
# --------------------------------------------------------------------------


def _open(source: str | Path | IO[bytes]) -> IO[bytes]:
    if isinstance(source, (str, Path)):
        try:
            raw: IO[bytes] = open(source, "rb")
        except OSError as exc:
            raise ArchiveError(f"cannot open archive: {exc}") from exc
    else:
        raw = source
    head = raw.read(2)
    rest = io.BufferedReader(_Prefixed(head, raw)) if head else io.BytesIO(b"")
    if head == GZIP_MAGIC:
        return gzip.GzipFile(fileobj=rest, mode="rb")  # type: ignore[return-value]
    return rest  # type: ignore[return-value]


class _Prefixed(io.RawIOBase):
    """Re-attach sniffed magic bytes in front of a stream."""

    def __init__(self, prefix: bytes, stream: IO[bytes]):
        self._prefix = prefix
        self._stream = stream

    def readable(self) -> bool:
        return True

    def readinto(self, b) -> int:  # type: ignore[override]
        if self._prefix:
            n = min(len(b), len(self._prefix))
            b[:n] = self._prefix[:n]
            self._prefix = self._prefix[n:]
            return n
        data = self._stream.read(len(b))
        b[: len(data)] = data
        return len(data)

    def close(self) -> None:
        self._stream.close()
        super().close()


def _lines(stream: IO[bytes]) -> Iterator[tuple[int, bytes]]:
    lineno = 0
    try:
        for lineno, line in enumerate(stream, start=1):
            yield lineno, line
    except (EOFError, OSError, gzip.BadGzipFile) as exc:
        raise ArchiveError(f"corrupted record {max(lineno - 1, 0)}: compressed stream ended early ({exc})") from None


def _parse_record(idx: int, line: bytes, k_a: int) -> tuple[dict[str, Any], list]:
    if not line.endswith(b"\n"):
        raise ArchiveError(f"corrupted record {idx}: truncated line")
    try:
        rec = json.loads(line)
        stages = rec["stages"]
        if rec["i"] != idx:
            raise ArchiveError(f"corrupted record {idx}: sample id {rec['i']} out of order")
        if len(rec["log_gamma"]) != k_a:
            raise ArchiveError(f"corrupted record {idx}: log_gamma has {len(rec['log_gamma'])} entries, expected {k_a}")
        rows = []
        seen_failed: set[int] = set()
        for j, st in enumerate(stages):
            alive = {int(k) for k, _ in st["cond"]}
            failed = [int(k) for k in st["failed"]]
            if not set(failed) <= alive:
                raise ArchiveError(f"corrupted record {idx}: stage {j} failed set not among its alive components")
            if seen_failed & set(failed):
                raise ArchiveError(f"corrupted record {idx}: failure sets overlap across stages")
            seen_failed |= set(failed)
            fs = set(failed)
            rows.extend((j, int(k), float(v), int(k) in fs) for k, v in st["cond"])
        if rec["n"] != sum(1 for st in stages if st["failed"]):
            raise ArchiveError(f"corrupted record {idx}: stage count n disagrees with stages")
        return rec, rows
    except ArchiveError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ArchiveError(f"corrupted record {idx}: {exc!r}") from None


def iter_archive(source: str | Path | IO[bytes]) -> tuple[ArchiveHeader, Iterator[CascadeSample]]:
    """Streaming reader: the header, plus a lazy iterator over samples."""
    stream = _open(source)
    lines = _lines(stream)
    try:
        _, first = next(lines)
    except StopIteration:
        raise ArchiveError("empty archive (no header)") from None
    try:
        header = ArchiveHeader.from_dict(json.loads(first))
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"corrupted header: {exc}") from None

    def samples() -> Iterator[CascadeSample]:
        from .records import StageRecord

        count = 0
        for _, line in lines:
            rec, _rows = _parse_record(count, line, header.k_a)
            stages = tuple(
                StageRecord(j, tuple(st["failed"]), {int(k): float(v) for k, v in st["cond"]})
                for j, st in enumerate(rec["stages"])
            )
            yield CascadeSample(count, stages, float(rec["y_mw"]), np.array(rec["log_gamma"], float), float(rec["log_g"]))
            count += 1
        if count != header.n_samples:
            raise ArchiveError(f"corrupted record {count}: archive truncated ({count} of {header.n_samples} records)")
        stream.close()

    return header, samples()


def read_archive(
    source: str | Path | IO[bytes],
    baseline: CoFPFSet | None = None,
    case_sha256: str | None = None,
) -> SampleArchive:
    """Read and fully validate an archive.

    ``baseline``, when given, must be the CoFPF set the archive was generated
    under (:class:`ArchiveMismatchError` otherwise).  A differing ``case_sha256``
    only warns, since reweighting never touches the network again.
    """
    stream = _open(source)
    lines = _lines(stream)
    try:
        _, first = next(lines)
    except StopIteration:
        raise ArchiveError("empty archive (no header)") from None
    try:
        header = ArchiveHeader.from_dict(json.loads(first))
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"corrupted header: {exc}") from None

    y, lg, log_g = [], [], []
    t_sample: list[int] = []
    t_stage: list[int] = []
    t_comp: list[int] = []
    t_s: list[float] = []
    t_failed: list[bool] = []
    count = 0
    for _, line in lines:
        rec, rows = _parse_record(count, line, header.k_a)
        y.append(rec["y_mw"])
        lg.append(rec["log_gamma"])
        log_g.append(rec["log_g"])
        for j, k, v, f in rows:
            t_sample.append(count)
            t_stage.append(j)
            t_comp.append(k)
            t_s.append(v)
            t_failed.append(f)
        count += 1
    stream.close()
    if count != header.n_samples:
        raise ArchiveError(f"corrupted record {count}: archive truncated ({count} of {header.n_samples} records)")

    table = ConditionTable(
        count, np.array(t_sample, np.int64), np.array(t_stage, np.int32), np.array(t_comp, np.int32),
        np.array(t_s, float), np.array(t_failed, bool),
    )
    archive = SampleArchive(
        header, np.array(y, float), table,
        np.array(lg, float).reshape(count, header.k_a), np.array(log_g, float),
    )
    archive.validate()
    if CoFPFSet.from_dict(header.cofpf).fingerprint() != header.cofpf_sha256:
        raise ArchiveError("header CoFPF spec does not match its recorded fingerprint")
    if baseline is not None:
        archive.check_baseline(baseline)
    if case_sha256 is not None and case_sha256 != header.case_sha256:
        warnings.warn(
            f"case hash {case_sha256[:12]} differs from the archive's {header.case_sha256[:12]}",
            CaseMismatchWarning, stacklevel=2,
        )
    return archive


def make_header(
    case_sha256: str,
    cofpfs: CoFPFSet,
    master_seed: int,
    n_samples: int,
    initial_outage: Iterable[int] = (),
    created: dict[str, Any] | None = None,
) -> ArchiveHeader:
    return ArchiveHeader(
        case_sha256=case_sha256,
        cofpf=cofpfs.to_dict(),
        cofpf_sha256=cofpfs.fingerprint(),
        master_seed=int(master_seed),
        n_samples=int(n_samples),
        k_a=len(cofpfs),
        initial_outage=tuple(int(k) for k in initial_outage),
        created=dict(created or {}),
    )
