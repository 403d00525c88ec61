from __future__ import annotations

import csv

import numpy as np
import pytest
from scipy import stats

from src.errors import MetricError
from src.metrics import RocCurve, ScoreSet, auc, evaluate, pe_min, roc, summarize_runs, wauc
from src.verify import brute_force_pe, numeric_wauc


def _separable(inverted: bool = False) -> ScoreSet:
    labels = np.array([0, 0, 1, 1])
    return ScoreSet(np.array([0.1, 0.2, 0.8, 0.9]), 1 - labels if inverted else labels)


def test_pe_min_separable_and_inverted():
    assert pe_min(_separable()) == 0.0
    assert pe_min(_separable(inverted=True)) == 0.5


def test_pe_min_matches_exhaustive_enumeration():
    rng = np.random.default_rng(0)
    s = ScoreSet(np.round(rng.random(1000), 3), rng.integers(0, 2, 1000))
    assert pe_min(s) == brute_force_pe(s)


def test_single_class_is_rejected():
    with pytest.raises(MetricError):
        pe_min(ScoreSet(np.array([0.1, 0.2]), np.array([1, 1])))
    with pytest.raises(MetricError):
        roc(ScoreSet(np.array([0.1]), np.array([0])))
    with pytest.raises(MetricError):
        ScoreSet(np.array([0.1, 0.2]), np.array([0, 2]))


def test_auc_simple_cases():
    assert auc(roc(_separable())) == 1.0
    ties = ScoreSet(np.full(6, 0.3), np.array([0, 1, 0, 1, 1, 0]))
    assert auc(roc(ties)) == 0.5
    curve = roc(ties)
    assert curve.points() == [(0.0, 0.0), (1.0, 1.0)]


def test_auc_matches_mann_whitney():
    rng = np.random.default_rng(1)
    s = ScoreSet(np.round(rng.random(500), 2), rng.integers(0, 2, 500))
    u = stats.mannwhitneyu(s.stegos, s.covers, alternative="two-sided").statistic
    assert abs(auc(roc(s)) - u / (s.stegos.size * s.covers.size)) <= 1e-12
    flipped = ScoreSet(s.scores, 1 - s.labels)
    assert abs(auc(roc(s)) + auc(roc(flipped)) - 1.0) <= 1e-12


def test_roc_is_monotone_with_ties():
    rng = np.random.default_rng(2)
    s = ScoreSet(rng.integers(0, 5, 300).astype(float), rng.integers(0, 2, 300))
    curve = roc(s)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    assert curve.points()[0] == (0.0, 0.0) and curve.points()[-1] == (1.0, 1.0)


def test_wauc_perfect_and_chance():
    perfect = RocCurve(np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 1.0]))
    assert wauc(perfect) == pytest.approx(1.0, abs=1e-15)
    assert wauc(perfect, "prose") == pytest.approx(1.0, abs=1e-15)
    diagonal = RocCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    assert wauc(diagonal) == pytest.approx(0.82 / 1.4, abs=1e-12)
    assert abs(wauc(diagonal) - numeric_wauc(diagonal)) <= 1e-9
    assert abs(wauc(diagonal, "prose") - numeric_wauc(diagonal, "prose")) <= 1e-9
    with pytest.raises(MetricError):
        wauc(diagonal, "sideways")


def test_wauc_splits_segments_at_the_band_edge():
    curve = RocCurve(np.array([0.0, 0.2, 1.0]), np.array([0.0, 0.9, 1.0]))
    assert abs(wauc(curve) - numeric_wauc(curve)) <= 1e-9


def test_metrics_are_rank_invariant():
    rng = np.random.default_rng(3)
    s = ScoreSet(rng.random(200), rng.integers(0, 2, 200))
    t = ScoreSet(np.exp(3 * s.scores) + 7, s.labels)
    a, b = evaluate(s), evaluate(t)
    assert a.pe == b.pe
    assert a.auc == b.auc
    assert a.wauc == b.wauc


def test_report_files(tmp_path):
    report = evaluate(_separable())
    report_path, roc_path = report.write(tmp_path)
    with report_path.open(newline="") as f:
        rows = {r["metric"]: float(r["value"]) for r in csv.DictReader(f)}
    assert rows["P_E"] == 0.0 and rows["AUC"] == 1.0 and rows["n_cover"] == 2
    with roc_path.open(newline="") as f:
        assert next(csv.reader(f)) == ["fpr", "tpr"]


def test_summarize_runs():
    mean, std = summarize_runs([0.1, 0.2, 0.3])
    assert mean == pytest.approx(0.2)
    assert std == pytest.approx(0.1)
    assert summarize_runs([0.4]) == (0.4, 0.0)
    with pytest.raises(MetricError):
        summarize_runs([])
