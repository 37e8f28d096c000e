import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zsc.metrics import CSV_FIELDS, evaluate

counts = st.floats(0.5, 500.0)
pairs = st.integers(1, 40).flatmap(
    lambda n: st.tuples(st.lists(counts, min_size=n, max_size=n),
                        st.lists(st.floats(-50.0, 600.0), min_size=n, max_size=n)))


def test_perfect_predictions():
    r = evaluate([3, 7, 1], [3, 7, 1])
    assert (r.mae, r.rmse, r.nae, r.sre) == (0, 0, 0, 0)


def test_hand_computed():
    r = evaluate([1, 4], [2, 2])
    assert r.mae == pytest.approx(1.5, abs=1e-12)
    assert r.rmse == pytest.approx(math.sqrt(2.5), abs=1e-12)
    assert r.nae == pytest.approx(0.75, abs=1e-12)
    assert r.sre == pytest.approx(1.0, abs=1e-12)
    assert r.n == 2 and r.relative_defined


def test_zero_count_flags_relative_metrics():
    r = evaluate([0, 4], [1, 2])
    assert r.mae == 1.5
    assert math.isnan(r.nae) and math.isnan(r.sre)
    assert not r.relative_defined
    assert json.loads(r.to_json())["nae"] is None


def test_errors():
    with pytest.raises(ValueError):
        evaluate([1, 2], [1])
    with pytest.raises(ValueError):
        evaluate([], [])


def test_serialization():
    r = evaluate([2, 5, 9], [2.5, 4, 10])
    d = json.loads(r.to_json())
    assert set(d) >= {"mae", "rmse", "nae", "sre", "n"}
    row = r.csv_row().split(",")
    assert len(row) == len(CSV_FIELDS) == 5
    assert float(row[0]) == r.mae and int(row[4]) == 3


@given(pairs)
def test_rmse_dominates_mae(p):
    r = evaluate(*p)
    assert r.rmse >= r.mae >= 0


@given(pairs, st.randoms(use_true_random=False))
def test_permutation_invariant(p, rnd):
    gts, preds = p
    idx = list(range(len(gts)))
    rnd.shuffle(idx)
    a = evaluate(gts, preds)
    b = evaluate([gts[i] for i in idx], [preds[i] for i in idx])
    for k in ("mae", "rmse", "nae", "sre"):
        assert getattr(a, k) == pytest.approx(getattr(b, k), rel=1e-12, abs=1e-12)


@given(pairs, st.floats(0.01, 100.0))
def test_scaling(p, alpha):
    gts, preds = map(np.asarray, p)
    a, b = evaluate(gts, preds), evaluate(alpha * gts, alpha * preds)
    assert b.mae == pytest.approx(alpha * a.mae, rel=1e-9, abs=1e-9)
    assert b.rmse == pytest.approx(alpha * a.rmse, rel=1e-9, abs=1e-9)
    assert b.nae == pytest.approx(a.nae, rel=1e-9, abs=1e-9)
    assert b.sre == pytest.approx(math.sqrt(alpha) * a.sre, rel=1e-9, abs=1e-9)
