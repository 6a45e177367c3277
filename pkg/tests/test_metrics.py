import csv
import io
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factories import small_config
from society_sim.errors import EmptyInput, SeriesTooShort
from society_sim.metrics import (
    SCHEMA_VERSION,
    csv_columns,
    detect_equilibrium,
    export,
    jain_index,
    summary,
)
from society_sim.simulation import run

# ------------------------------------------------------------------ jain


@pytest.mark.parametrize(
    "x, want", [([5, 5, 5, 5], 1.0), ([1, 0, 0, 0], 0.25), ([1, 2, 3], 36 / 42), ([0, 0], 1.0), ([7], 1.0)]
)
def test_jain_examples(x, want):
    assert jain_index(x) == pytest.approx(want)


def test_jain_errors():
    with pytest.raises(EmptyInput):
        jain_index([])
    with pytest.raises(ValueError):
        jain_index([1, -1])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.fractions(0, 100), min_size=1, max_size=12).filter(any))
def test_jain_bounds_against_exact_formula(x):
    n = len(x)
    exact = sum(x) ** 2 / (n * sum(v * v for v in x))
    j = jain_index([float(v) for v in x])
    assert j == pytest.approx(float(exact), rel=1e-12)
    assert 1 / n - 1e-12 <= j <= 1.0
    assert (exact == 1) == (len(set(x)) == 1)


# ------------------------------------------------------------------ equilibrium


def test_constant_series_settles_at_window():
    assert detect_equilibrium([[1.0, 2.0]] * 40, window=10, tol=0.01) == 10


def test_start_epoch_offsets_result():
    assert detect_equilibrium([[1.0]] * 40, window=10, tol=0.01, start_epoch=150) == 160


def test_diverging_series_has_no_equilibrium():
    assert detect_equilibrium([[1.05**t] for t in range(100)], window=10, tol=0.01) is None


def test_settling_series():
    series = [[1.0 + (0.5 * (t % 2) if t < 20 else 0.0)] for t in range(60)]
    assert detect_equilibrium(series, window=10, tol=0.01) == 30


def test_mapping_rows_accepted():
    assert detect_equilibrium([{"A": 1.0, "B": 2.0}] * 5, window=2, tol=0.1) == 2


def test_equilibrium_errors():
    with pytest.raises(SeriesTooShort):
        detect_equilibrium([[1.0]] * 5, window=10, tol=0.01)
    with pytest.raises(ValueError):
        detect_equilibrium([[1.0]] * 5, window=1, tol=0.01)
    with pytest.raises(ValueError):
        detect_equilibrium([[1.0]] * 5, window=2, tol=0)


def _brute_equilibrium(series, window, tol):
    for e in range(window, len(series)):
        chunk = series[e - window: e + 1]
        ok = True
        for k in range(len(series[0])):
            vals = [Fraction(row[k]) for row in chunk]
            lo, hi = min(vals), max(vals)
            if hi != lo and (hi - lo) / lo >= Fraction(tol):
                ok = False
        if ok:
            return e
    return None


prices_st = st.integers(1, 3).flatmap(
    lambda k: st.lists(st.lists(st.sampled_from([1.0, 1.001, 1.005, 1.02, 1.1]), min_size=k, max_size=k), min_size=4, max_size=40)
)


@settings(max_examples=300, deadline=None)
@given(prices_st, st.integers(2, 4), st.sampled_from([0.002, 0.01, 0.05, 0.2]))
def test_equilibrium_matches_brute_force(series, window, tol):
    if len(series) < window + 1:
        return
    assert detect_equilibrium(series, window, tol) == _brute_equilibrium(series, window, tol)


@settings(max_examples=300, deadline=None)
@given(prices_st, st.integers(2, 4), st.floats(0.001, 0.1), st.floats(0.001, 0.1))
def test_equilibrium_monotone_in_tolerance(series, window, t1, t2):
    if len(series) < window + 1:
        return
    lo, hi = sorted((t1, t2))
    e_lo, e_hi = detect_equilibrium(series, window, lo), detect_equilibrium(series, window, hi)
    if e_lo is not None:
        assert e_hi is not None and e_lo >= e_hi


# ------------------------------------------------------------------ export


def test_csv_column_order():
    assert csv_columns(["A"], ["M1"]) == [
        "epoch", "op_A_price", "op_A_revenue", "op_A_subs", "mvno_M1_subs",
        "soc_q_p10", "soc_q_p50", "soc_q_p90", "exc_q_p50", "jain_society", "donated", "unallocated",
    ]
    assert csv_columns(["A"], ["M1"], ["A"])[-1] == "share_A"


def test_zero_epoch_run_is_header_only(tmp_path):
    r = run(small_config(), epochs=0)
    path = export(r.metrics, "csv", tmp_path / "m.csv", operators=r.operators, mvnos=r.mvnos)
    lines = path.read_text().splitlines()
    assert lines == [",".join(csv_columns(r.operators, r.mvnos))]
    s = r.summary()
    assert s["epochs"] == 0 and s["final"] is None and s["equilibrium"]["epoch"] is None


def test_csv_rows_match_metrics(tmp_path):
    r = run(small_config(), epochs=12)
    rows = list(csv.DictReader(io.StringIO(r.csv())))
    assert len(rows) == 12
    for row, m in zip(rows, r.metrics):
        assert int(row["epoch"]) == m.epoch
        assert float(row["op_A_price"]) == m.prices["A"]
        subs = sum(int(row[f"op_{o}_subs"]) for o in "ABC") + sum(int(row[f"mvno_M{k}_subs"]) for k in (1, 2, 3))
        assert subs == 200


def test_export_is_byte_stable(tmp_path):
    a, b = run(small_config(), epochs=15), run(small_config(), epochs=15)
    for fmt in ("csv", "json"):
        pa = export(a.metrics, fmt, tmp_path / f"a.{fmt}", operators=a.operators, mvnos=a.mvnos, summary_data=a.summary())
        pb = export(b.metrics, fmt, tmp_path / f"b.{fmt}", operators=b.operators, mvnos=b.mvnos, summary_data=b.summary())
        assert pa.read_bytes() == pb.read_bytes()


def test_export_errors(tmp_path):
    r = run(small_config(), epochs=2)
    with pytest.raises(ValueError):
        export(r.metrics, "xml", tmp_path / "x", operators=r.operators, mvnos=r.mvnos)
    with pytest.raises(ValueError):
        export(r.metrics, "json", tmp_path / "x", operators=r.operators, mvnos=r.mvnos)
    with pytest.raises(OSError):
        export(r.metrics, "csv", tmp_path / "missing" / "x.csv", operators=r.operators, mvnos=r.mvnos)


def test_summary_contents():
    r = run(small_config(), epochs=25)
    s = summary(
        r.metrics, scenario="small", seed=7, operators=r.operators, mvnos=r.mvnos,
        equilibrium_window=5, equilibrium_tol=0.5,
    )
    assert s["schema_version"] == SCHEMA_VERSION == 1
    assert s["epochs"] == 25
    assert s["equilibrium"]["epoch"] == 5  # fixed prices never move
    assert s["equilibrium"]["mean_prices"] == {"A": 1.0, "B": 1.0, "C": 1.0}
    last = r.metrics[-1]
    assert s["final"]["society_share"] == last.society_share
    assert sum(s["final"]["operator_subs"].values()) + sum(s["final"]["mvno_subs"].values()) == 200
    assert s["aggregate"]["operator_revenue"]["A"] == pytest.approx(math.fsum(m.op_revenue["A"] for m in r.metrics))
    json.dumps(s, allow_nan=False)


def test_metric_invariants_hold_every_epoch():
    r = run(small_config(), epochs=30)
    for m in r.metrics:
        assert m.population == 200
        assert 0 <= m.soc_q_p10 <= m.soc_q_p50 <= m.soc_q_p90
        assert 0 < m.jain_society <= 1
        assert m.quality.shape == (200,) and np.all(m.quality >= 0)
        assert m.donated >= 0 and m.unallocated >= 0
