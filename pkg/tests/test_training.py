"""Tests for the learning-rate schedule, Adam, early stopping and the training loops."""

import numpy as np
import pytest
from pydantic import ValidationError

from fatigue_tool.config import AppConfig, with_overrides
from fatigue_tool.data import SynthParams, holdout_split, synth_generate
from fatigue_tool.exceptions import ConfigurationError, ContractViolationError, NumericalError
from fatigue_tool.heads import LossConfig, predict
from fatigue_tool.metrics import auc, fatigue_probability, roc_curve
from fatigue_tool.monitoring import setup_logging
from fatigue_tool.tensor import Tensor
from fatigue_tool.training import (
    FOLD_COLUMNS,
    AdamState,
    EpochRecord,
    TrainConfig,
    adam_step,
    config_from_app,
    cross_validate,
    early_stop_check,
    evaluate,
    lr_at,
    read_curves,
    train,
    write_curves,
    write_loss_terms,
)
from tests.conftest import write_dataset


def quick_config(**overrides):
    values = {
        "total_iterations": 300,
        "max_epochs": 2,
        "batch_size": 2,
        "augmentation": "none",
        "base_lr": 1e-3,
    } | overrides
    return TrainConfig(**values)


# ===== Tests for lr_at() =====


@pytest.mark.parametrize(
    ("iteration", "expected"),
    [
        (0, 1e-5),
        (99, 1e-5),
        (100, 2e-6),
        (150, 2e-6),
        (199, 2e-6),
        (200, 4e-7),
        (250, 4e-7),
        (299, 4e-7),
    ],
)
def test_lr_steps(iteration, expected):
    assert lr_at(iteration, 300, 1e-5) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("iteration", [-1, 300])
def test_lr_outside_schedule(iteration):
    with pytest.raises(ContractViolationError, match="outside"):
        lr_at(iteration, 300, 1e-5)


def test_total_iterations_is_required():
    with pytest.raises(ValidationError, match="total_iterations"):
        TrainConfig()


# ===== Tests for adam_step() =====


def test_adam_zero_gradient_leaves_parameters():
    theta = Tensor([1.0, -2.0], requires_grad=True)
    adam_step({"w": theta}, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert theta.data.tolist() == [1.0, -2.0]


def test_adam_first_step_moves_by_lr():
    theta = Tensor([1.0], requires_grad=True)
    adam_step({"w": theta}, {"w": np.ones(1)}, AdamState(), lr=0.1)
    assert theta.data[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_weight_decay_pulls_toward_zero():
    theta = Tensor([2.0], requires_grad=True)
    adam_step({"w": theta}, {"w": np.zeros(1)}, AdamState(), lr=0.1, weight_decay=0.01)
    assert theta.data[0] == pytest.approx(1.9, abs=1e-6)


def test_adam_updates_are_reproducible():
    def run():
        theta = Tensor([0.5, 0.25], requires_grad=True)
        state = AdamState()
        for g in ([1.0, -1.0], [0.5, 0.2], [-0.3, 0.1]):
            adam_step({"w": theta}, {"w": np.array(g)}, state, lr=0.01)
        return theta.data.copy(), state.step

    (first, steps), (second, _) = run(), run()
    np.testing.assert_array_equal(first, second)
    assert steps == 3


def test_adam_gradient_shape_mismatch():
    with pytest.raises(ContractViolationError, match="gradient"):
        adam_step({"w": Tensor([1.0, 2.0])}, {"w": np.ones(3)}, AdamState(), lr=0.1)


# ===== Tests for early_stop_check() =====


def test_decreasing_losses_continue():
    decision = early_stop_check([5.0, 4.0, 3.0, 2.0], patience=2)
    assert decision.action == "continue"
    assert decision.best_epoch == 3


def test_stop_after_patience_without_improvement():
    losses = [10.0 - i for i in range(6)] + [5.5] * 20
    decision = early_stop_check(losses, patience=20)
    assert decision.stop
    assert decision.best_epoch == 5
    assert len(losses) - 1 == 25


def test_one_epoch_short_of_patience_continues():
    losses = [10.0 - i for i in range(6)] + [5.5] * 19
    assert not early_stop_check(losses, patience=20).stop


def test_ties_do_not_count_as_improvement():
    decision = early_stop_check([1.0, 1.0, 1.0], patience=2)
    assert decision.best_epoch == 0
    assert decision.stop


def test_early_stop_needs_history():
    with pytest.raises(ContractViolationError):
        early_stop_check([], patience=3)


# ===== Tests for curves files =====


def test_curves_round_trip(tmp_path):
    curves = [EpochRecord(0, 0.9, 0.8, 0.5, 1e-5), EpochRecord(1, 0.7, 0.75, 0.625, 2e-6)]
    write_curves(curves, tmp_path / "curves.csv")
    assert (tmp_path / "curves.csv").read_text().splitlines()[0] == (
        "epoch,train_loss,val_loss,val_accuracy,lr"
    )
    loaded = read_curves(tmp_path / "curves.csv")
    assert [(c.epoch, c.val_loss, c.lr) for c in loaded] == [(0, 0.8, 1e-5), (1, 0.75, 2e-6)]


# ===== Tests for train() and evaluate() =====


def test_train_records_every_epoch(make_model, tiny_dataset):
    seen: list[EpochRecord] = []
    result = train(make_model(), tiny_dataset, quick_config(), on_epoch=seen.append)
    assert result.epochs == 2
    assert [c.epoch for c in result.curves] == [0, 1]
    assert seen == result.curves
    # three batches of two per epoch
    assert len(result.lr_trace) == 6
    assert all(np.isfinite([c.train_loss, c.val_loss]).all() for c in result.curves)
    assert 0.0 <= result.curves[-1].val_accuracy <= 1.0
    assert not result.stopped_early


def test_train_is_deterministic(make_model, tiny_dataset):
    first = train(make_model(), tiny_dataset, quick_config(augmentation="more"))
    second = train(make_model(), tiny_dataset, quick_config(augmentation="more"))
    for a, b in zip(first.curves, second.curves, strict=True):
        assert a.train_loss == pytest.approx(b.train_loss, abs=1e-6)
        assert a.val_loss == pytest.approx(b.val_loss, abs=1e-6)
    for name, value in first.best_state.items():
        np.testing.assert_array_equal(value, second.best_state[name])


def test_train_leaves_best_weights_loaded(make_model, tiny_dataset):
    model = make_model()
    result = train(model, tiny_dataset, quick_config())
    state = model.state_dict()
    for name, value in result.best_state.items():
        np.testing.assert_array_equal(state[name], value)


def test_lr_trace_follows_schedule(make_model, tiny_dataset):
    result = train(make_model(), tiny_dataset, quick_config(total_iterations=6, base_lr=1e-2))
    np.testing.assert_allclose(result.lr_trace, [1e-2, 1e-2, 2e-3, 2e-3, 4e-4, 4e-4])


def test_nan_weights_raise_numerical_error(make_model, tiny_dataset):
    model = make_model()
    model.fc2.weights.data[:] = np.nan
    with pytest.raises(NumericalError, match="epoch 0"):
        train(model, tiny_dataset, quick_config())


def test_loss_terms_reported_at_zero_alpha(make_model, tiny_dataset, tmp_path, capsys):
    setup_logging()
    result = train(make_model(), tiny_dataset, quick_config(alpha=0.0, max_epochs=1))
    record = result.curves[0]

    assert record.train_cross_entropy > 0.0
    assert record.train_loss == pytest.approx(record.train_mse, rel=1e-9)
    assert "cross_entropy=" in capsys.readouterr().err

    write_loss_terms(result.curves, tmp_path / "loss_terms.csv")
    header, row = (tmp_path / "loss_terms.csv").read_text().splitlines()
    assert header == "epoch,train_loss,train_cross_entropy,train_mse"
    assert float(row.split(",")[2]) == record.train_cross_entropy


def test_loss_terms_add_up_with_alpha(make_model, tiny_dataset):
    result = train(make_model(), tiny_dataset, quick_config(alpha=0.5, max_epochs=1))
    record = result.curves[0]

    expected = 0.5 * record.train_cross_entropy + record.train_mse
    assert record.train_loss == pytest.approx(expected, rel=1e-5)


def test_head_mismatch_rejected(make_model, tiny_dataset):
    with pytest.raises(ContractViolationError, match="does not match"):
        train(make_model(), tiny_dataset, quick_config(head="continuous"))


def test_attention_mismatch_rejected(make_model, tiny_dataset):
    with pytest.raises(ContractViolationError, match="attention"):
        train(make_model(attention_position="none"), tiny_dataset, quick_config())


def test_continuous_head_trains(make_model, tiny_dataset):
    model = make_model(head=LossConfig(head="continuous"))
    result = train(model, tiny_dataset, quick_config(head="continuous", max_epochs=1))
    assert result.epochs == 1


def test_evaluate_in_manifest_order(make_model, tiny_dataset):
    out = evaluate(make_model(), tiny_dataset, LossConfig(), batch_size=3)
    assert out.logits.shape == (8, 2)
    assert out.records == tiny_dataset.records
    assert out.loss > 0.0
    assert 0.0 <= out.accuracy <= 1.0


@pytest.mark.slow
def test_overfits_separable_clips(make_model, tmp_path):
    manifest = write_dataset(tmp_path, [0, 1] * 8)
    model = make_model()
    cfg = quick_config(
        max_epochs=40,
        batch_size=4,
        base_lr=3e-3,
        total_iterations=1000,
        patience=40,
        weight_decay=0.0,
    )
    train(model, manifest, cfg, val_manifest=manifest)
    assert evaluate(model, manifest, cfg.loss_config, batch_size=16, mode="train").accuracy >= 0.95


@pytest.mark.slow
def test_polarized_synthetic_videos_are_separable(make_model, tmp_path):
    data = synth_generate(SynthParams(n_videos=40, frames=32, polarized=True, seed=2), tmp_path)
    train_ids, val_ids = holdout_split(data, 0.25, seed=2)
    model = make_model(width=4)
    cfg = quick_config(
        max_epochs=60, batch_size=8, base_lr=3e-3, total_iterations=2000, patience=60
    )
    train(model, data.subset(train_ids), cfg, val_manifest=data.subset(val_ids))

    out = evaluate(model, data.subset(val_ids), cfg.loss_config, batch_size=10)
    scores = fatigue_probability(predict(out.logits, cfg.loss_config).scores, 2)
    labels = np.array([r.categorical for r in out.records])
    assert auc(roc_curve(scores, labels, 1)) >= 0.90


# ===== Tests for cross_validate() =====


def test_cross_validate_five_folds(make_model, five_video_dataset, tmp_path):
    cfg = quick_config(max_epochs=1)
    report = cross_validate(five_video_dataset, cfg, make_model, k=5)
    assert [f.fold for f in report.folds] == [0, 1, 2, 3, 4]
    val_sets = [val for _, val in report.splits]
    assert all(len(val) == 1 for val in val_sets)
    assert sorted(v for val in val_sets for v in val) == five_video_dataset.video_ids()
    assert all(f.epochs == 1 for f in report.folds)

    report.write_tsv(tmp_path / "cv.tsv")
    lines = (tmp_path / "cv.tsv").read_text().splitlines()
    assert lines[0].split("\t") == list(FOLD_COLUMNS)
    assert len(lines) == 7
    assert lines[-1].startswith("# mean_min_val_loss\t")


# ===== Tests for config_from_app() =====


def test_config_from_app_requires_total_iterations():
    with pytest.raises(ConfigurationError, match="total_iterations"):
        config_from_app(AppConfig(), seed=0)


def test_config_from_app_maps_sections():
    app = with_overrides(
        AppConfig(),
        train__total_iterations=90,
        train__lr=0.01,
        dataset__k=3,
        model__head="categorical",
    )
    cfg = config_from_app(app, seed=7)
    assert (cfg.total_iterations, cfg.base_lr, cfg.k, cfg.seed) == (90, 0.01, 3, 7)
    assert cfg.loss_config == LossConfig(k=3)
