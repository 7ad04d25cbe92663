"""Tests for label normalization, the expectation transform, losses and prediction."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from fatigue_tool.exceptions import ContractViolationError
from fatigue_tool.heads import (
    LabelPair,
    LossConfig,
    bin_midpoints,
    expectation_tensor,
    expectation_transform,
    head_loss,
    loss_combined,
    loss_continuous,
    normalize_labels,
    predict,
)
from fatigue_tool.tensor import Tensor, backward, grad_check, softmax

# ===== Tests for LossConfig =====


def test_loss_config_widths():
    assert LossConfig().width == 2
    assert LossConfig(k=5).width == 5
    assert LossConfig(head="continuous", k=1).width == 1


def test_categorical_head_needs_two_classes():
    with pytest.raises(ValidationError, match="k >= 2"):
        LossConfig(k=1)


def test_negative_alpha_rejected():
    with pytest.raises(ValidationError):
        LossConfig(alpha=-0.5)


# ===== Tests for normalize_labels() =====


def test_normalize_lowest_rating():
    assert normalize_labels(1.0, 2) == LabelPair(0.0, 0)


def test_normalize_highest_rating_clamps_to_last_class():
    assert normalize_labels(5.0, 2) == LabelPair(1.0, 1)
    assert normalize_labels(5.0, 4) == LabelPair(1.0, 3)


def test_normalize_midpoint_falls_in_upper_bin():
    assert normalize_labels(3.0, 2) == LabelPair(0.5, 1)


def test_normalize_just_below_half():
    assert normalize_labels(2.0, 2) == LabelPair(0.25, 0)


@pytest.mark.parametrize("rating", [0.5, 5.5])
def test_normalize_out_of_range(rating):
    with pytest.raises(ContractViolationError, match="outside"):
        normalize_labels(rating, 2)


# ===== Tests for the expectation transform =====


def test_bin_midpoints():
    np.testing.assert_allclose(bin_midpoints(2), [0.25, 0.75])
    np.testing.assert_allclose(bin_midpoints(4), [0.125, 0.375, 0.625, 0.875])


def test_expectation_one_hot_gives_midpoint():
    assert expectation_transform([1.0, 0.0]) == 0.25
    assert expectation_transform([0.0, 1.0]) == 0.75


def test_expectation_symmetric_cases():
    assert expectation_transform([0.5, 0.5]) == pytest.approx(0.5)
    assert expectation_transform(np.full(5, 0.2)) == pytest.approx(0.5)


def test_expectation_stays_within_midpoint_range(rng):
    for k in (2, 3, 5):
        for q in rng.dirichlet(np.ones(k), size=20):
            value = expectation_transform(q)
            assert 1 / (2 * k) - 1e-12 <= value <= 1 - 1 / (2 * k) + 1e-12


def test_expectation_rejects_non_distribution():
    with pytest.raises(ContractViolationError, match="distribution"):
        expectation_transform([0.7, 0.7])
    with pytest.raises(ContractViolationError):
        expectation_transform([1.0])


def test_expectation_tensor_matches_scalar_form(rng):
    q = rng.dirichlet(np.ones(3), size=4)
    out = expectation_tensor(Tensor(q)).data
    expected = [expectation_transform(row) for row in q.astype(np.float32).astype(np.float64)]
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_expectation_after_softmax_grad_check(rng):
    logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert grad_check(lambda t: expectation_tensor(softmax(t, axis=1)).sum(), logits).passed


# ===== Tests for loss_continuous() =====


def test_continuous_loss_at_target():
    assert loss_continuous(Tensor([[0.0]]), [0.5]).item() == 0.0


def test_continuous_loss_value():
    assert loss_continuous(Tensor([[0.0]]), [1.0]).item() == pytest.approx(0.25)


def test_continuous_loss_rejects_targets_outside_unit_interval():
    with pytest.raises(ContractViolationError, match=r"\[0, 1\]"):
        loss_continuous(Tensor([[0.0]]), [1.5])


def test_continuous_loss_count_mismatch():
    with pytest.raises(ContractViolationError, match="predictions"):
        loss_continuous(Tensor([[0.0], [1.0]]), [0.5])


# ===== Tests for loss_combined() =====


def test_combined_loss_hand_evaluated():
    total, breakdown = loss_combined(Tensor([[0.0, 0.0]]), [LabelPair(0.75, 1)], LossConfig())
    assert breakdown.cross_entropy == pytest.approx(math.log(2.0), rel=1e-6)
    assert breakdown.mse == pytest.approx(0.0625, rel=1e-6)
    assert total.item() == pytest.approx(math.log(2.0) + 0.0625, rel=1e-6)


def test_combined_loss_vanishes_on_confident_midpoint():
    _, breakdown = loss_combined(Tensor([[60.0, -60.0]]), [LabelPair(0.25, 0)], LossConfig())
    assert breakdown.total == pytest.approx(0.0, abs=1e-9)


def test_zero_alpha_is_plain_mse(rng):
    labels = [LabelPair(0.2, 0), LabelPair(0.9, 1), LabelPair(0.6, 1)]
    raw = rng.normal(size=(3, 2))

    with_ce = Tensor(raw, requires_grad=True)
    total, breakdown = loss_combined(with_ce, labels, LossConfig(alpha=0.0))
    assert breakdown.total == breakdown.mse
    assert breakdown.cross_entropy > 0.0
    backward(total)

    mse_only = Tensor(raw, requires_grad=True)
    q = softmax(mse_only, axis=1)
    diff = expectation_tensor(q) - Tensor([0.2, 0.9, 0.6])
    backward((diff * diff).mean())
    np.testing.assert_allclose(with_ce.grad, mse_only.grad, atol=1e-7)


def test_combined_loss_is_affine_in_alpha(rng):
    logits = rng.normal(size=(4, 3))
    labels = [LabelPair(0.1, 0), LabelPair(0.5, 1), LabelPair(0.95, 2), LabelPair(0.4, 1)]

    def total(alpha):
        return loss_combined(Tensor(logits), labels, LossConfig(alpha=alpha, k=3))[1]

    base, unit = total(0.0), total(1.0)
    slope = unit.total - base.total
    assert slope == pytest.approx(base.cross_entropy, rel=1e-5)
    for alpha in (0.25, 2.0, 7.5):
        breakdown = total(alpha)
        assert breakdown.total == pytest.approx(base.total + alpha * slope, rel=1e-5)
        assert breakdown.cross_entropy == base.cross_entropy
        assert breakdown.mse == base.mse


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_combined_loss_grad_check(rng, alpha):
    logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    labels = [LabelPair(0.1, 0), LabelPair(0.5, 1), LabelPair(0.95, 2), LabelPair(0.4, 1)]
    cfg = LossConfig(alpha=alpha, k=3)
    assert grad_check(lambda t: loss_combined(t, labels, cfg)[0], logits).passed


def test_combined_loss_rejects_label_out_of_range():
    with pytest.raises(ContractViolationError, match="out of range"):
        loss_combined(Tensor([[0.0, 0.0]]), [LabelPair(0.5, 2)], LossConfig())


def test_combined_loss_rejects_continuous_head():
    with pytest.raises(ContractViolationError, match="categorical"):
        loss_combined(Tensor([[0.0]]), [LabelPair(0.5, 1)], LossConfig(head="continuous"))


def test_head_loss_dispatches_on_head():
    _, breakdown = head_loss(Tensor([[0.0]]), [LabelPair(1.0, 1)], LossConfig(head="continuous"))
    assert breakdown.cross_entropy == 0.0
    assert breakdown.total == pytest.approx(0.25)


# ===== Tests for predict() =====


def test_predict_categorical():
    logits = np.log([[0.9, 0.1]])
    pred = predict(logits, LossConfig())
    assert pred.classes.tolist() == [0]
    assert pred.continuous[0] == pytest.approx(0.3)


def test_predict_tie_goes_to_lower_class():
    pred = predict([[1.0, 1.0]], LossConfig())
    assert pred.classes.tolist() == [0]
    assert pred.continuous[0] == pytest.approx(0.5)


def test_predict_one_hot_top_class():
    pred = predict([[-50.0, -50.0, -50.0, 50.0]], LossConfig(k=4))
    assert pred.classes.tolist() == [3]
    assert pred.continuous[0] == pytest.approx(1 - 1 / 8)


def test_predict_continuous_head():
    pred = predict([[0.0], [5.0]], LossConfig(head="continuous"))
    assert pred.classes.tolist() == [1, 1]
    np.testing.assert_allclose(pred.scores[:, 1], pred.continuous)
    assert pred.continuous[0] == pytest.approx(0.5)
