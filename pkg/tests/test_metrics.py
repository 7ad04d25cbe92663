"""Tests for polarity-swapped metrics, ROC curves and smoothing."""

import numpy as np
import pytest

from fatigue_tool.exceptions import ContractViolationError
from fatigue_tool.metrics import (
    MetricRow,
    auc,
    average_roc,
    binarize,
    build_report,
    class_recall,
    ema_corrected,
    fatigue_probability,
    prf1,
    roc_curve,
    swap_average,
    video_level,
)


def mann_whitney_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(float(p > n) + 0.5 * float(p == n) for p in pos for n in neg)
    return wins / (pos.size * neg.size)


# ===== Tests for prf1() and swap_average() =====


def test_reported_treatment_rows_average():
    fatigue_pos = MetricRow(0.6930, 0.8287, 0.8089, 0.8187)
    alert_pos = MetricRow(0.7573, 0.8540, 0.8699, 0.8619)
    average = swap_average([fatigue_pos, alert_pos])
    for got, expected in zip(
        average.values().values(), (0.7252, 0.8414, 0.8394, 0.8404), strict=True
    ):
        assert got == pytest.approx(expected, abs=5e-4)


def test_prf1_counts():
    preds = [1, 1, 0, 0, 1, 0]
    labels = [1, 0, 0, 1, 1, 0]
    fatigue = prf1(preds, labels, 1)
    assert fatigue.accuracy == pytest.approx(4 / 6)
    assert fatigue.precision == pytest.approx(2 / 3)
    assert fatigue.recall == pytest.approx(2 / 3)
    alert = prf1(preds, labels, 0)
    assert alert.accuracy == fatigue.accuracy
    assert alert.precision == pytest.approx(2 / 3)
    assert alert.f1 == pytest.approx(2 / 3)


def test_prf1_flags_missing_positives():
    row = prf1([0, 0, 0], [1, 0, 1], 1)
    assert row.precision == 0.0
    assert row.no_predicted_positives
    assert not row.no_actual_positives

    row = prf1([1, 0], [0, 0], 1)
    assert row.recall == 0.0
    assert row.no_actual_positives


def test_prf1_rejects_non_binary():
    with pytest.raises(ContractViolationError, match="binary"):
        prf1([0, 2], [0, 1])


def test_swap_average_needs_both_rows():
    with pytest.raises(ContractViolationError):
        swap_average([MetricRow(1.0, 1.0, 1.0, 1.0)])


def test_class_recall():
    assert class_recall([1, 0, 1, 1], [1, 1, 0, 1], 1) == pytest.approx(2 / 3)
    assert class_recall([1, 1], [1, 1], 0) == 0.0


# ===== Tests for roc_curve() and auc() =====


def test_auc_matches_mann_whitney():
    rng = np.random.default_rng(0)
    done = 0
    while done < 100:
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        if np.unique(labels).size < 2:
            continue
        scores = rng.integers(0, 8, size=n) / 8.0
        area = auc(roc_curve(scores, labels, 1))
        assert area == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-9)
        done += 1


def test_perfect_separation():
    curve = roc_curve([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert auc(curve) == 1.0
    assert curve[0] == (0.0, 0.0)
    assert curve[-1] == (1.0, 1.0)


def test_constant_scores_give_half():
    assert auc(roc_curve([0.5] * 4, [0, 1, 0, 1])) == pytest.approx(0.5)


def test_alert_positive_curve_mirrors():
    scores = np.array([0.1, 0.4, 0.35, 0.8])
    labels = np.array([0, 0, 1, 1])
    fatigue_auc = auc(roc_curve(scores, labels, 1))
    alert_auc = auc(roc_curve(1.0 - scores, labels, 0))
    assert fatigue_auc == pytest.approx(alert_auc)


def test_roc_needs_both_classes():
    with pytest.raises(ContractViolationError, match="both classes"):
        roc_curve([0.1, 0.2], [1, 1])


def test_roc_rejects_non_finite_scores():
    with pytest.raises(ContractViolationError, match="finite"):
        roc_curve([0.1, np.nan], [0, 1])


def test_average_roc_grid():
    perfect = roc_curve([0.1, 0.9], [0, 1])
    chance = roc_curve([0.5, 0.5], [0, 1])
    averaged = average_roc(perfect, chance)
    assert len(averaged) == 101
    assert averaged[0] == (0.0, 0.5)
    assert averaged[50][0] == pytest.approx(0.5)
    assert averaged[50][1] == pytest.approx(0.75)
    assert averaged[-1] == (1.0, 1.0)


def test_average_of_identical_curves_keeps_area():
    curve = roc_curve([0.1, 0.4, 0.35, 0.8, 0.6], [0, 0, 1, 1, 0])
    assert auc(average_roc(curve, curve)) == pytest.approx(auc(curve), abs=0.02)


# ===== Tests for ema_corrected() =====


def test_ema_bias_correction():
    smoothed = ema_corrected([1.0, 2.0, 3.0], 0.9)
    assert smoothed[0] == pytest.approx(1.0)
    assert smoothed[1] == pytest.approx(1.526316, abs=1e-6)
    assert smoothed[2] == pytest.approx(2.070111, abs=1e-6)


def test_ema_of_constant_series_is_constant():
    assert ema_corrected([0.4] * 10, 0.9) == pytest.approx([0.4] * 10)


def test_ema_rejects_bad_beta():
    with pytest.raises(ContractViolationError, match="beta"):
        ema_corrected([1.0], 1.0)


# ===== Tests for reports and label helpers =====


def test_build_report_text():
    report = build_report([1, 0, 1, 0], [1, 0, 0, 0], fatigue_scores=[0.9, 0.2, 0.6, 0.1])
    text = report.to_text()
    assert text.startswith("samples\t4\n")
    assert "fatigue_pos.accuracy\t0.750000" in text
    assert "alert_pos.recall\t0.666667" in text
    assert "average.f1\t" in text
    assert "fatigue_pos.auc\t1.000000" in text
    assert "# roc average" in text
    treatments = [row["treatment"] for row in report.table_rows()]
    assert treatments == ["fatigue_pos", "alert_pos", "average"]


def test_build_report_single_class_skips_roc():
    report = build_report([1, 1], [1, 1], fatigue_scores=[0.7, 0.8])
    assert report.curves == {}
    assert "alert_pos.flag\tno_actual_positives" in report.to_text()


def test_binarize_upper_half():
    assert binarize([0, 1], 2).tolist() == [0, 1]
    assert binarize([0, 1, 2, 3, 4], 5).tolist() == [0, 0, 0, 1, 1]
    assert binarize([0, 1, 2, 3], 4).tolist() == [0, 0, 1, 1]


def test_fatigue_probability():
    np.testing.assert_allclose(fatigue_probability([[0.3, 0.7]], 2), [0.7])
    np.testing.assert_allclose(fatigue_probability([[0.1, 0.2, 0.3, 0.4]], 4), [0.7])
    np.testing.assert_allclose(fatigue_probability([[0.4, 0.6]], 2, "continuous"), [0.6])


def test_video_level_means():
    ids, means, labels = video_level(["b", "a", "b", "a"], [0.2, 0.6, 0.4, 1.0], [0, 1, 0, 1])
    assert ids == ["a", "b"]
    np.testing.assert_allclose(means, [0.8, 0.3])
    assert labels.tolist() == [1, 0]
