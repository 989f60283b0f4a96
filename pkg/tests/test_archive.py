from __future__ import annotations

import io
import json
import warnings

import numpy as np
import pytest

from cascade_risk.archive import (
    ArchiveError,
    ArchiveMismatchError,
    CaseMismatchWarning,
    SampleArchive,
    iter_archive,
    make_header,
    read_archive,
    write_archive,
)
from cascade_risk.cascade_sim import run_batch
from cascade_risk.cofpf import uniform_pmin_cofpfs
from cascade_risk.grid_model import case_hash


def _same(a: SampleArchive, b: SampleArchive) -> None:
    assert a.header == b.header
    np.testing.assert_array_equal(a.y_mw, b.y_mw)
    np.testing.assert_array_equal(a.log_gamma, b.log_gamma)
    np.testing.assert_array_equal(a.log_g, b.log_g)
    for col in ("sample", "stage", "comp", "s", "failed"):
        np.testing.assert_array_equal(getattr(a.table, col), getattr(b.table, col))


def _bytes(archive, compress=False) -> bytes:
    buf = io.BytesIO()
    write_archive(archive, buf, compress=compress)
    return buf.getvalue()


def test_round_trip_is_exact(tri_archive, tmp_path):
    p = tmp_path / "a.jsonl"
    n = write_archive(tri_archive, p)
    assert n == p.stat().st_size
    back = read_archive(p)
    _same(tri_archive, back)
    assert [s.stages for s in list(back)[:50]] == [s.stages for s in list(tri_archive)[:50]]


def test_writes_are_byte_identical(tri_archive, triangle, tri_cofpfs):
    again = run_batch(triangle, tri_cofpfs, len(tri_archive), master_seed=5)
    assert _bytes(tri_archive) == _bytes(again)
    assert _bytes(tri_archive, True) == _bytes(again, True)


def test_gzip_detected_by_magic(tri_archive, tmp_path):
    p = tmp_path / "a.gz"
    write_archive(tri_archive, p)
    assert p.read_bytes()[:2] == b"\x1f\x8b"
    _same(tri_archive, read_archive(p))
    q = tmp_path / "no_suffix"
    q.write_bytes(p.read_bytes())
    _same(tri_archive, read_archive(q))
    assert len(p.read_bytes()) < len(_bytes(tri_archive))


def test_empty_archive(triangle, tri_cofpfs):
    arch = run_batch(triangle, tri_cofpfs, 0, master_seed=0)
    data = _bytes(arch)
    assert data.count(b"\n") == 1
    back = read_archive(io.BytesIO(data))
    assert len(back) == 0 and back.header.n_samples == 0


def test_truncated_file_reports_record(tri_archive):
    data = _bytes(tri_archive)
    lines = data.split(b"\n")
    cut = b"\n".join(lines[:11]) + b"\n" + lines[11][: len(lines[11]) // 2]
    with pytest.raises(ArchiveError, match="corrupted record 10"):
        read_archive(io.BytesIO(cut))
    whole_lines = b"\n".join(lines[:11]) + b"\n"
    with pytest.raises(ArchiveError, match="corrupted record 10: archive truncated"):
        read_archive(io.BytesIO(whole_lines))


def test_truncated_gzip(tri_archive):
    data = _bytes(tri_archive, True)
    with pytest.raises(ArchiveError, match="corrupted record"):
        read_archive(io.BytesIO(data[: len(data) // 2]))


def test_corrupted_json_record(tri_archive):
    lines = _bytes(tri_archive).split(b"\n")
    lines[4] = b"{not json"
    with pytest.raises(ArchiveError, match="corrupted record 3"):
        read_archive(io.BytesIO(b"\n".join(lines)))


def test_overlapping_failures_rejected(tri_archive):
    lines = _bytes(tri_archive).split(b"\n")
    rec = {"i": 0, "n": 2, "y_mw": 0.0, "log_g": 0.0, "log_gamma": [0.0, 0.0, 0.0],
           "stages": [{"failed": [1], "cond": [[0, 0.1], [1, 0.2], [2, 0.3]]},
                      {"failed": [1], "cond": [[0, 0.1], [1, 0.2]]}]}
    lines[1] = json.dumps(rec).encode()
    with pytest.raises(ArchiveError, match="record 0"):
        read_archive(io.BytesIO(b"\n".join(lines)))


def test_log_g_must_match_row_sum(tri_archive):
    lines = _bytes(tri_archive).split(b"\n")
    rec = json.loads(lines[1])
    rec["log_g"] += 1e-3
    lines[1] = json.dumps(rec).encode()
    with pytest.raises(ArchiveError, match="log_g"):
        read_archive(io.BytesIO(b"\n".join(lines)))


def test_baseline_mismatch(tri_archive, tri_cofpfs):
    data = _bytes(tri_archive)
    read_archive(io.BytesIO(data), baseline=tri_cofpfs)
    other = tri_cofpfs.replace({0: tri_cofpfs[0].with_pmin(0.02)})
    with pytest.raises(ArchiveMismatchError):
        read_archive(io.BytesIO(data), baseline=other)


def test_case_hash_mismatch_warns(tri_archive, triangle, toy2):
    data = _bytes(tri_archive)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        read_archive(io.BytesIO(data), case_sha256=case_hash(triangle))
    with pytest.warns(CaseMismatchWarning):
        read_archive(io.BytesIO(data), case_sha256=case_hash(toy2))


def test_version_check(tri_archive):
    lines = _bytes(tri_archive).split(b"\n")
    head = json.loads(lines[0])
    head["version"] = "1.7"
    lines[0] = json.dumps(head).encode()
    assert read_archive(io.BytesIO(b"\n".join(lines))).header.version == "1.7"
    head["version"] = "2.0"
    lines[0] = json.dumps(head).encode()
    with pytest.raises(ArchiveError, match="incompatible"):
        read_archive(io.BytesIO(b"\n".join(lines)))
    head["format"] = "something-else"
    lines[0] = json.dumps(head).encode()
    with pytest.raises(ArchiveError, match="not a sample archive"):
        read_archive(io.BytesIO(b"\n".join(lines)))


def test_tampered_cofpf_fingerprint(tri_archive):
    lines = _bytes(tri_archive).split(b"\n")
    head = json.loads(lines[0])
    head["cofpf"]["components"][0]["p_min"] = 0.031
    lines[0] = json.dumps(head).encode()
    with pytest.raises(ArchiveError, match="fingerprint"):
        read_archive(io.BytesIO(b"\n".join(lines)))


def test_empty_file(tmp_path):
    p = tmp_path / "e"
    p.write_bytes(b"")
    with pytest.raises(ArchiveError, match="empty"):
        read_archive(p)
    with pytest.raises(ArchiveError, match="cannot open"):
        read_archive(tmp_path / "missing")


def test_streaming_matches_bulk(tri_archive):
    data = _bytes(tri_archive, True)
    header, samples = iter_archive(io.BytesIO(data))
    assert header == tri_archive.header
    for i, s in enumerate(samples):
        ref = tri_archive[i]
        assert s.stages == ref.stages and s.y_mw == ref.y_mw and s.log_g == ref.log_g
    assert i == len(tri_archive) - 1


def test_streaming_detects_truncation(tri_archive):
    data = b"\n".join(_bytes(tri_archive).split(b"\n")[:6]) + b"\n"
    _, samples = iter_archive(io.BytesIO(data))
    with pytest.raises(ArchiveError, match="truncated"):
        list(samples)


def test_from_samples_round_trip(tri_archive):
    samples = list(tri_archive)[:100]
    head = make_header(tri_archive.header.case_sha256, tri_archive.cofpfs, 5, 100)
    arch = SampleArchive.from_samples(head, samples)
    arch.validate()
    np.testing.assert_array_equal(arch.y_mw, tri_archive.y_mw[:100])
    np.testing.assert_array_equal(arch.log_gamma, tri_archive.log_gamma[:100])


def test_header_count_checked_on_write(tri_archive):
    head = make_header("x", tri_archive.cofpfs, 0, 5)
    bad = SampleArchive(head, tri_archive.y_mw[:3], tri_archive.table, tri_archive.log_gamma[:3])
    with pytest.raises(ArchiveError):
        write_archive(bad, io.BytesIO())


def test_archive_arrays_read_only(tri_archive):
    with pytest.raises(ValueError):
        tri_archive.y_mw[0] = 1.0
    with pytest.raises(ValueError):
        tri_archive.log_gamma[0, 0] = 1.0


def test_case30_round_trip(case30_archive):
    _same(case30_archive, read_archive(io.BytesIO(_bytes(case30_archive, True))))
    assert case30_archive.cofpfs.fingerprint() == uniform_pmin_cofpfs(41, seed=11).fingerprint()
