from __future__ import annotations

import csv
import io
import json
import math

import numpy as np
import pytest

from cascade_risk.cofpf import Form
from cascade_risk.errors import DataError
from cascade_risk.oracle import enumerate_paths, exact_risk
from cascade_risk.risk_engine import Scenario, reweighted_risk
from cascade_risk.sweep import (
    CSV_COLUMNS,
    Mutation,
    SweepRow,
    load_scenarios,
    pairs,
    run_sweep,
    singles,
)

Y0S = (0.0, 5.0, 15.0)


def test_scenario_generators():
    assert singles(3) == [(0,), (1,), (2,)]
    assert pairs(4) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def test_mutation_validation():
    with pytest.raises(ValueError):
        Mutation()
    with pytest.raises(ValueError):
        Mutation(delta_pmin=0.1, to_form=Form.EXPONENTIAL)
    assert Mutation(to_form="exponential-blend").to_form is Form.EXPONENTIAL
    assert Mutation(delta_pmin=0.001).label == "delta-pmin=0.001"


def test_zero_change_gives_zero_ratio(case30_archive):
    rep = run_sweep(case30_archive, ("singles", "pairs"), Mutation(delta_pmin=0.0), Y0S)
    assert len(rep.rows) == (41 + 41 * 40 // 2) * len(Y0S)
    assert all(r.change_ratio_pct == 0.0 for r in rep.rows)
    base = {b.y0_mw: b.value for b in rep.baseline}
    assert all(r.risk_mw == base[r.y0_mw] for r in rep.rows)


@pytest.mark.parametrize("mode, count", [("singles", 41), ("pairs", 41 * 40 // 2)])
def test_row_counts(case30_archive, mode, count):
    rep = run_sweep(case30_archive, mode, Mutation(delta_pmin=0.001), Y0S)
    assert rep.n_scenarios == count
    assert len(rep.rows) == count * len(Y0S)
    assert len({r.components for r in rep.rows}) == count
    assert {"b_matrix_s", "estimate_s", "total_s"} <= set(rep.timing)


def test_gram_matches_direct_reweighting(case30_archive):
    mut = Mutation(delta_pmin=0.0015)
    rep = run_sweep(case30_archive, ("singles", "pairs"), mut, Y0S)
    base = case30_archive.cofpfs
    by_key = {(r.components, r.y0_mw): r for r in rep.rows}
    for comps in [(0,), (17,), (40,), (0, 1), (5, 33), (39, 40)]:
        sc = Scenario({k: mut.apply(base[k]) for k in comps})
        for y0 in Y0S:
            ref = reweighted_risk(case30_archive, sc, y0)
            row = by_key[(comps, y0)]
            assert row.risk_mw == pytest.approx(ref.value, rel=1e-10, abs=1e-12)
            assert row.stderr_mw == pytest.approx(ref.stderr, rel=1e-8, abs=1e-12)
            assert row.ess == pytest.approx(ref.ess, rel=1e-10)
            assert row.low_ess == ref.low_ess


def test_form_change_sweep_matches_direct(case30_archive):
    mut = Mutation(to_form=Form.EXPONENTIAL)
    rep = run_sweep(case30_archive, "pairs", mut, (0.0,))
    base = case30_archive.cofpfs
    row = next(r for r in rep.rows if r.components == (3, 8))
    ref = reweighted_risk(case30_archive, Scenario({k: mut.apply(base[k]) for k in (3, 8)}), 0.0)
    assert row.risk_mw == pytest.approx(ref.value, rel=1e-10)


def test_invalid_mutation_reported_in_row(case30_archive):
    base = case30_archive.cofpfs
    delta = 0.004
    bad = {k for k in range(41) if base[k].p_min - delta <= 0}
    assert bad and len(bad) < 41
    rep = run_sweep(case30_archive, ("singles", "pairs"), Mutation(delta_pmin=delta), (0.0,))
    for r in rep.rows:
        if set(r.components) & bad:
            assert r.error and "p_min" in r.error and math.isnan(r.risk_mw)
        else:
            assert not r.error and math.isfinite(r.risk_mw)


def test_ratio_sign_convention(case30_archive):
    rep = run_sweep(case30_archive, "singles", Mutation(delta_pmin=0.0015), (0.0,))
    r_g = rep.baseline[0].value
    for r in rep.rows:
        assert r.change_ratio_pct == pytest.approx((r_g - r.risk_mw) / r_g * 100.0)
    # lowering failure probabilities lowers risk on average
    assert np.mean([r.change_ratio_pct for r in rep.rows]) > 0


def test_sorted_by_ratio(case30_archive):
    rep = run_sweep(case30_archive, "singles", Mutation(delta_pmin=0.004), (0.0,))
    rows = rep.sorted_by_ratio()
    ok = [r.change_ratio_pct for r in rows if not r.error]
    assert ok == sorted(ok, reverse=True)
    assert all(r.error for r in rows[len(ok):])


def test_csv_layout(case30_archive):
    rep = run_sweep(case30_archive, "singles", Mutation(delta_pmin=0.004), Y0S)
    table = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(table[0]) == CSV_COLUMNS
    assert len(table) == 1 + 41 * len(Y0S)
    for line in table[1:]:
        if line[-1]:
            assert line[3:7] == ["", "", "", ""]
        else:
            float(line[3]), float(line[6])


def test_json_has_no_nan(case30_archive):
    rep = run_sweep(case30_archive, "singles", Mutation(delta_pmin=0.004), (0.0, 1e9))
    doc = json.loads(rep.to_json())
    assert doc["n_scenarios"] == 41
    assert "NaN" not in rep.to_json()
    # no sample reaches y0 = 1e9, so risk is 0 both before and after the change
    assert all(r["change_ratio_pct"] == 0.0 for r in doc["rows"] if "error" not in r and r["y0_mw"] == 1e9)


def test_row_to_dict_error_shape():
    d = SweepRow("x", (1,), 0.0, error="boom").to_dict()
    assert d == {"scenario": "x", "components": [1], "y0_mw": 0.0, "error": "boom"}


def test_from_file(case30_archive, tmp_path):
    base = case30_archive.cofpfs
    doc = {"scenarios": [
        {"components": [4, 2, 9], "label": "three"},
        {"components": [1], "cofpfs": {"1": {"form": "exponential-blend"}}},
        {"components": [5], "cofpfs": {"5": {"p_min": -1}}},
        {"components": [6], "cofpfs": {"6": {"p_min": base[6].p_min}}},
    ]}
    p = tmp_path / "s.json"
    p.write_text(json.dumps(doc))
    scen = load_scenarios(p, 41)
    assert scen[0] == ("three", (2, 4, 9), None)
    mut = Mutation(delta_pmin=0.001)
    rep = run_sweep(case30_archive, "from-file", mut, Y0S, scen)
    rows = {(r.scenario, r.y0_mw): r for r in rep.rows}
    ref = reweighted_risk(case30_archive, Scenario({k: mut.apply(base[k]) for k in (2, 4, 9)}), 5.0)
    assert rows[("three", 5.0)].risk_mw == pytest.approx(ref.value, rel=1e-12)
    ref = reweighted_risk(case30_archive, Scenario({1: base[1].with_form("exponential-blend")}), 0.0)
    assert rows[("1", 0.0)].risk_mw == pytest.approx(ref.value, rel=1e-12)
    assert rows[("5", 0.0)].error
    assert rows[("6", 15.0)].change_ratio_pct == 0.0


def test_from_file_without_mutation(case30_archive):
    rep = run_sweep(case30_archive, "from-file", None, (0.0,), [("a", (3,), None)])
    assert "no CoFPF override" in rep.rows[0].error


@pytest.mark.parametrize(
    "doc",
    [{"scenarios": [{"components": [99]}]}, {"scenarios": [{"label": "x"}]}, {"scenarios": 3},
     {"scenarios": [{"components": [1], "cofpfs": {"2": {}}}]}, {"scenarios": [{"components": [1, 1]}]}],
)
def test_bad_scenario_files(tmp_path, doc):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(DataError):
        load_scenarios(p, 41)


def test_mode_validation(case30_archive):
    with pytest.raises(ValueError):
        run_sweep(case30_archive, "triples", Mutation(delta_pmin=0.001), Y0S)
    with pytest.raises(ValueError):
        run_sweep(case30_archive, ("from-file", "pairs"), Mutation(delta_pmin=0.001), Y0S, [])
    with pytest.raises(ValueError):
        run_sweep(case30_archive, "singles", None, Y0S)
    with pytest.raises(ValueError):
        run_sweep(case30_archive, "singles", Mutation(delta_pmin=0.001), ())


def test_singles_agree_with_exact_enumeration(triangle, tri_cofpfs, tri_archive):
    mut = Mutation(delta_pmin=0.02)
    y0s = (0.0, 40.0)
    rep = run_sweep(tri_archive, ("singles", "pairs"), mut, y0s)
    for r in rep.rows:
        new = tri_cofpfs.replace({k: mut.apply(tri_cofpfs[k]) for k in r.components})
        exact = exact_risk(enumerate_paths(triangle, new), r.y0_mw)
        assert abs(r.risk_mw - exact) <= 3.5 * r.stderr_mw, (r, exact)
