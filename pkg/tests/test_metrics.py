import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import mann_whitney_auc, roc_by_enumeration
from xray_ensemble.metrics import (
    UndefinedMetricError,
    auc,
    roc_auc,
    roc_curve,
    tpr_at_threshold,
    write_summary_csv,
)


def test_perfect_separation():
    s, y = [0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]
    assert (0.0, 1.0) in roc_curve(s, y).points()
    assert roc_auc(s, y) == 1.0


def test_constant_scores():
    curve = roc_curve([0.3] * 6, [0, 1, 0, 1, 1, 0])
    assert curve.points() == [(0.0, 0.0), (1.0, 1.0)]
    assert auc(curve) == 0.5


def test_enumerated_small_case():
    s, y = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert roc_curve(s, y).points() == roc_by_enumeration(s, y)
    assert roc_auc(s, y) == 0.75


def test_random_50_against_mann_whitney():
    r = np.random.default_rng(0)
    s = r.random(50)
    y = r.integers(0, 2, 50)
    assert abs(roc_auc(s, y) - mann_whitney_auc(s, y)) < 1e-9


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=60)
       .filter(lambda xs: len({y for _, y in xs}) == 2))
def test_auc_equals_pair_statistic_with_ties(pairs):
    s = np.array([p[0] / 6 for p in pairs])
    y = np.array([p[1] for p in pairs])
    assert abs(roc_auc(s, y) - mann_whitney_auc(s, y)) < 1e-9
    assert roc_curve(s, y).points() == roc_by_enumeration(s, y)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_curve_monotone_and_anchored(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 80))
    y = r.integers(0, 2, n)
    y[:2] = [0, 1]
    curve = roc_curve(r.random(n).round(2), y)
    assert curve.points()[0] == (0.0, 0.0) and curve.points()[-1] == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    assert np.all(np.diff(curve.thresholds) < 0)


def test_auc_invariant_to_monotone_transform():
    r = np.random.default_rng(3)
    s, y = r.random(40), r.integers(0, 2, 40)
    assert roc_auc(s, y) == pytest.approx(roc_auc(np.exp(3 * s), y), abs=1e-15)


def test_tpr_rules():
    assert tpr_at_threshold([0.9, 0.9, 0.1], [1, 1, 0]) == 1.0
    assert tpr_at_threshold([0.1, 0.1, 0.9], [1, 1, 0]) == 0.0
    assert tpr_at_threshold([0.5, 0.49], [1, 1]) == 0.5


def test_undefined_cases():
    with pytest.raises(UndefinedMetricError):
        roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        tpr_at_threshold([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        roc_curve([0.1, np.nan], [0, 1])
    with pytest.raises(ValueError):
        roc_curve([0.1, 0.2, 0.3], [0, 1])


def test_csv_outputs(tmp_path):
    roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).to_csv(tmp_path / "roc.csv")
    rows = list(csv.reader(open(tmp_path / "roc.csv")))
    assert rows[0] == ["threshold", "fpr", "tpr"] and rows[1] == ["inf", "0.0", "0.0"]
    write_summary_csv(tmp_path / "s.csv", [("ensemble", 0.9, 0.75)])
    assert open(tmp_path / "s.csv").read() == "model,auc,tpr\nensemble,0.9,0.75\n"
