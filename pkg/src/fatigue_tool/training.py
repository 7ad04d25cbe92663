"""Adam, the stepped learning-rate schedule, early stopping and the training loops."""

from __future__ import annotations

import csv
import math
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from fatigue_tool.attention import AttentionPosition
from fatigue_tool.config import AppConfig
from fatigue_tool.data import (
    AugmentParams,
    AugmentStrategy,
    Clip,
    Manifest,
    SampleRecord,
    apply_augmentation,
    holdout_split,
    kfold_split,
    sample_augmentation,
)
from fatigue_tool.exceptions import (
    ConfigurationError,
    ContractViolationError,
    DataError,
    NumericalError,
)
from fatigue_tool.heads import HeadKind, LabelPair, LossConfig, head_loss, predict
from fatigue_tool.model import ModelGraph
from fatigue_tool.monitoring import get_logger
from fatigue_tool.nn import Mode
from fatigue_tool.tensor import Tensor, backward
from fatigue_tool.utils import derive_seed, stable_id

log = get_logger("training")

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPSILON = 1e-8
LR_DECAY = 0.2
CURVES_HEADER = ("epoch", "train_loss", "val_loss", "val_accuracy", "lr")
LOSS_TERMS_HEADER = ("epoch", "train_loss", "train_cross_entropy", "train_mse")


class TrainConfig(BaseModel):
    """Hyperparameters of one training run."""

    model_config = ConfigDict(frozen=True)

    base_lr: float = Field(default=1e-5, gt=0.0)
    weight_decay: float = Field(default=0.001, ge=0.0)
    batch_size: int = Field(default=32, ge=2)
    patience: int = Field(default=20, ge=1)
    total_iterations: int = Field(ge=1, description="Length of the LR schedule in optimizer steps")
    max_epochs: int = Field(default=200, ge=1)
    alpha: float = Field(default=1.0, ge=0.0)
    k: int = Field(default=2, ge=1)
    head: HeadKind = "categorical"
    attention_position: AttentionPosition = "after_block3"
    augmentation: AugmentStrategy = "more"
    val_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, k=self.k, head=self.head)


# ===== Schedule, optimizer, stopping rule =====


def lr_at(iteration: int, total_iterations: int, base_lr: float) -> float:
    """base_lr, then x0.2 from total/3, then x0.04 from 2*total/3."""
    if not 0 <= iteration < total_iterations:
        raise ContractViolationError(f"iteration {iteration} outside [0, {total_iterations})")
    if 3 * iteration < total_iterations:
        return base_lr
    if 3 * iteration < 2 * total_iterations:
        return base_lr * LR_DECAY
    return base_lr * LR_DECAY * LR_DECAY


@dataclass
class AdamState:
    m: dict[str, npt.NDArray[np.float64]] = field(default_factory=dict)
    v: dict[str, npt.NDArray[np.float64]] = field(default_factory=dict)
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    epsilon: float = ADAM_EPSILON


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, npt.NDArray[np.float32]]:
    return {
        name: t.grad if t.grad is not None else np.zeros(t.shape, dtype=np.float32)
        for name, t in params.items()
    }


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, npt.ArrayLike],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """Bias-corrected Adam; weight decay enters as an L2 term on the gradient. Updates in place."""
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, tensor in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != tensor.shape:
            raise ContractViolationError(f"{name}: gradient {g.shape} vs parameter {tensor.shape}")
        theta = tensor.data.astype(np.float64)
        if weight_decay:
            g = g + weight_decay * theta
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        tensor.data[...] = theta - update


@dataclass(frozen=True)
class EarlyStop:
    stop: bool
    best_epoch: int

    @property
    def action(self) -> str:
        return "stop" if self.stop else "continue"


def early_stop_check(val_losses: Sequence[float], patience: int = 20) -> EarlyStop:
    """Stop once ``patience`` epochs pass without a strictly lower validation loss.

    Epochs are 0-based indices into ``val_losses``; ties with the minimum do not count
    as improvement.
    """
    if not val_losses:
        raise ContractViolationError("early_stop_check needs at least one epoch")
    if patience < 1:
        raise ContractViolationError(f"patience must be >= 1, got {patience}")
    best = int(np.argmin(np.asarray(val_losses, dtype=np.float64)))
    return EarlyStop(stop=len(val_losses) - 1 - best >= patience, best_epoch=best)


# ===== Epoch loop =====


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    train_accuracy: float = float("nan")
    train_cross_entropy: float = float("nan")
    train_mse: float = float("nan")


@dataclass
class TrainResult:
    curves: list[EpochRecord]
    lr_trace: list[float]
    best_epoch: int
    best_state: dict[str, npt.NDArray[np.float32]]
    stopped_early: bool

    @property
    def epochs(self) -> int:
        return len(self.curves)


@dataclass(frozen=True)
class EvalOutput:
    loss: float
    accuracy: float
    logits: npt.NDArray[np.float64]
    records: list[SampleRecord]


def _labels(records: Sequence[SampleRecord]) -> list[LabelPair]:
    return [LabelPair(r.continuous, r.categorical) for r in records]


def _check_labels(manifest: Manifest, cfg: TrainConfig) -> None:
    bad = [r.video_id for r in manifest.records if r.categorical >= cfg.k]
    if bad:
        raise DataError(f"categorical labels exceed k={cfg.k} for videos {sorted(set(bad))[:5]}")


def _batches(items: Sequence[int], size: int, drop_short: bool) -> Iterator[list[int]]:
    for start in range(0, len(items), size):
        batch = list(items[start : start + size])
        if drop_short and len(batch) < 2:
            return
        yield batch


def _augment_batch(
    clips: list[Clip], cfg: TrainConfig, epoch: int, batch_index: int
) -> npt.NDArray[np.float32]:
    if cfg.augmentation == "none":
        return np.stack([c.data for c in clips])
    if cfg.augmentation == "less":
        rng = np.random.default_rng(derive_seed(cfg.seed, "augment", epoch, batch_index))
        shared = sample_augmentation(rng, "less")
        return np.stack([apply_augmentation(c.data, shared) for c in clips])
    augmented = []
    for c in clips:
        seed = derive_seed(cfg.seed, "augment", epoch, stable_id(c.video_id), c.clip_index)
        params: AugmentParams = sample_augmentation(np.random.default_rng(seed), "more")
        augmented.append(apply_augmentation(c.data, params))
    return np.stack(augmented)


def evaluate(
    model: ModelGraph,
    manifest: Manifest,
    cfg: LossConfig,
    batch_size: int = 8,
    mode: Mode = "eval",
) -> EvalOutput:
    """Loss, accuracy and logits over every clip of ``manifest``, in manifest order."""
    if len(manifest) == 0:
        raise DataError("cannot evaluate an empty manifest")
    records = manifest.records
    total = 0.0
    logits: list[npt.NDArray[np.float64]] = []
    for batch in _batches(range(len(records)), batch_size, drop_short=False):
        chosen = [records[i] for i in batch]
        x = Tensor(np.stack([manifest.load(r).data for r in chosen]))
        out = model.forward(x, mode)
        _, breakdown = head_loss(out, _labels(chosen), cfg)
        total += breakdown.total * len(chosen)
        logits.append(out.data.astype(np.float64))
    stacked = np.concatenate(logits)
    classes = predict(stacked, cfg).classes
    truth = np.array([r.categorical for r in records])
    return EvalOutput(
        loss=total / len(records),
        accuracy=float(np.mean(classes == truth)),
        logits=stacked,
        records=list(records),
    )


def train(
    model: ModelGraph,
    manifest: Manifest,
    cfg: TrainConfig,
    val_manifest: Manifest | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place and leave it holding the best-epoch weights.

    Without ``val_manifest`` a video-level holdout of ``cfg.val_fraction`` is
    taken from ``manifest``.
    """
    if len(manifest) == 0:
        raise DataError("training manifest is empty")
    if model.head.head != cfg.head or model.head.width != cfg.loss_config.width:
        raise ContractViolationError(f"model head {model.head} does not match {cfg.loss_config}")
    if model.attention_position != cfg.attention_position:
        raise ContractViolationError(
            f"model attention {model.attention_position!r} does not match "
            f"the training config's {cfg.attention_position!r}"
        )
    _check_labels(manifest, cfg)
    if val_manifest is None:
        split_seed = derive_seed(cfg.seed, "data")
        train_ids, val_ids = holdout_split(manifest, cfg.val_fraction, split_seed)
        manifest, val_manifest = manifest.subset(train_ids), manifest.subset(val_ids)
    if len(manifest) < 2:
        raise DataError("training needs at least 2 clips (batch norm)")
    if len(val_manifest) == 0:
        raise DataError("validation manifest is empty")

    loss_cfg = cfg.loss_config
    params = model.parameters()
    state = AdamState()
    curves: list[EpochRecord] = []
    lr_trace: list[float] = []
    best_state = model.state_dict()
    best_loss = math.inf
    iteration = 0
    decision = EarlyStop(stop=False, best_epoch=0)

    for epoch in range(cfg.max_epochs):
        shuffle = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch))
        order = shuffle.permutation(len(manifest))
        seen = 0
        loss_sum = 0.0
        ce_sum = 0.0
        mse_sum = 0.0
        correct = 0
        lr = lr_trace[-1] if lr_trace else cfg.base_lr
        batches = _batches(order.tolist(), cfg.batch_size, drop_short=True)
        for batch_index, batch in enumerate(batches):
            records = [manifest.records[i] for i in batch]
            clips = [manifest.load(r) for r in records]
            x = Tensor(_augment_batch(clips, cfg, epoch, batch_index))
            labels = _labels(records)

            model.zero_grad()
            logits = model.forward(x, "train")
            if not np.isfinite(logits.data).all():
                log.error("logits_not_finite", epoch=epoch, iteration=iteration)
                raise NumericalError(f"non-finite logits at epoch {epoch}, iteration {iteration}")
            loss, breakdown = head_loss(logits, labels, loss_cfg)
            if not math.isfinite(breakdown.total):
                log.error("loss_not_finite", epoch=epoch, iteration=iteration, loss=breakdown.total)
                raise NumericalError(
                    f"loss became {breakdown.total} at epoch {epoch}, iteration {iteration} "
                    f"(cross_entropy={breakdown.cross_entropy}, mse={breakdown.mse})"
                )
            backward(loss)
            lr = lr_at(min(iteration, cfg.total_iterations - 1), cfg.total_iterations, cfg.base_lr)
            adam_step(params, collect_grads(params), state, lr, cfg.weight_decay)
            lr_trace.append(lr)
            iteration += 1

            seen += len(batch)
            loss_sum += breakdown.total * len(batch)
            ce_sum += breakdown.cross_entropy * len(batch)
            mse_sum += breakdown.mse * len(batch)
            predicted = predict(logits.data, loss_cfg).classes
            correct += int(np.sum(predicted == np.array([lab.categorical for lab in labels])))

        val = evaluate(model, val_manifest, loss_cfg, cfg.batch_size)
        if not math.isfinite(val.loss):
            raise NumericalError(f"validation loss became {val.loss} at epoch {epoch}")
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / seen,
            val_loss=val.loss,
            val_accuracy=val.accuracy,
            lr=lr,
            train_accuracy=correct / seen,
            train_cross_entropy=ce_sum / seen,
            train_mse=mse_sum / seen,
        )
        curves.append(record)
        log.info(
            "epoch_done",
            epoch=epoch,
            train_loss=round(record.train_loss, 6),
            cross_entropy=round(record.train_cross_entropy, 6),
            mse=round(record.train_mse, 6),
            val_loss=round(record.val_loss, 6),
            val_accuracy=round(record.val_accuracy, 4),
            lr=lr,
        )
        if on_epoch is not None:
            on_epoch(record)
        if val.loss < best_loss:
            best_loss = val.loss
            best_state = model.state_dict()
        decision = early_stop_check([c.val_loss for c in curves], cfg.patience)
        if decision.stop:
            log.info("early_stop", epoch=epoch, best_epoch=decision.best_epoch)
            break

    model.load_state(best_state)
    return TrainResult(
        curves=curves,
        lr_trace=lr_trace,
        best_epoch=decision.best_epoch,
        best_state=best_state,
        stopped_early=decision.stop,
    )


def write_curves(curves: Sequence[EpochRecord], path: Path) -> None:
    """CSV with header epoch,train_loss,val_loss,val_accuracy,lr; one row per epoch."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVES_HEADER)
        for c in curves:
            writer.writerow(
                [c.epoch, repr(c.train_loss), repr(c.val_loss), repr(c.val_accuracy), repr(c.lr)]
            )


def write_loss_terms(curves: Sequence[EpochRecord], path: Path) -> None:
    """Per-epoch training loss split into its cross-entropy and MSE terms.

    The cross-entropy column is filled at alpha = 0 too; the continuous head reports 0.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOSS_TERMS_HEADER)
        for c in curves:
            writer.writerow(
                [c.epoch, repr(c.train_loss), repr(c.train_cross_entropy), repr(c.train_mse)]
            )


def read_curves(path: Path) -> list[EpochRecord]:
    with path.open(encoding="utf-8") as f:
        return [
            EpochRecord(
                epoch=int(row["epoch"]),
                train_loss=float(row["train_loss"]),
                val_loss=float(row["val_loss"]),
                val_accuracy=float(row["val_accuracy"]),
                lr=float(row["lr"]),
            )
            for row in csv.DictReader(f)
        ]


# ===== Cross-validation =====


@dataclass(frozen=True)
class FoldReport:
    fold: int
    init_train_loss: float
    min_train_loss: float
    init_val_loss: float
    min_val_loss: float
    epochs: int

    @classmethod
    def from_curves(cls, fold: int, curves: Sequence[EpochRecord]) -> FoldReport:
        return cls(
            fold=fold,
            init_train_loss=curves[0].train_loss,
            min_train_loss=min(c.train_loss for c in curves),
            init_val_loss=curves[0].val_loss,
            min_val_loss=min(c.val_loss for c in curves),
            epochs=len(curves),
        )


FOLD_COLUMNS = (
    "fold",
    "init_train_loss",
    "min_train_loss",
    "init_val_loss",
    "min_val_loss",
    "total_epochs",
)


@dataclass
class CrossValReport:
    folds: list[FoldReport]
    curves: list[list[EpochRecord]] = field(default_factory=list)
    splits: list[tuple[list[str], list[str]]] = field(default_factory=list)

    @property
    def mean_min_val_loss(self) -> float:
        return float(np.mean([f.min_val_loss for f in self.folds]))

    def rows(self) -> list[dict[str, str]]:
        return [
            {
                "fold": str(f.fold),
                "init_train_loss": f"{f.init_train_loss:.6f}",
                "min_train_loss": f"{f.min_train_loss:.6f}",
                "init_val_loss": f"{f.init_val_loss:.6f}",
                "min_val_loss": f"{f.min_val_loss:.6f}",
                "total_epochs": str(f.epochs),
            }
            for f in self.folds
        ]

    def write_tsv(self, path: Path) -> None:
        lines = ["\t".join(FOLD_COLUMNS)]
        lines.extend("\t".join(row[c] for c in FOLD_COLUMNS) for row in self.rows())
        lines.append(f"# mean_min_val_loss\t{self.mean_min_val_loss:.6f}")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cross_validate(
    manifest: Manifest,
    cfg: TrainConfig,
    build: Callable[[], ModelGraph],
    k: int = 5,
) -> CrossValReport:
    """Train a fresh model from ``build()`` on each video-level fold."""
    splits = kfold_split(manifest, k, derive_seed(cfg.seed, "data"))
    report = CrossValReport(folds=[], splits=splits)
    for fold, (train_ids, val_ids) in enumerate(splits):
        result = train(build(), manifest.subset(train_ids), cfg, manifest.subset(val_ids))
        report.folds.append(FoldReport.from_curves(fold, result.curves))
        report.curves.append(result.curves)
        log.info(
            "fold_done",
            fold=fold,
            epochs=result.epochs,
            min_val_loss=report.folds[-1].min_val_loss,
        )
    log.info("cv_done", folds=k, mean_min_val_loss=report.mean_min_val_loss)
    return report


def config_from_app(app: AppConfig, seed: int) -> TrainConfig:
    """TrainConfig from the resolved ``train``, ``model``, ``dataset.k`` and ``augment`` keys."""
    if app.train.total_iterations is None:
        raise ConfigurationError("train.total_iterations is required for training")
    return TrainConfig(
        base_lr=app.train.lr,
        weight_decay=app.train.weight_decay,
        batch_size=app.train.batch_size,
        patience=app.train.patience,
        total_iterations=app.train.total_iterations,
        max_epochs=app.train.max_epochs,
        alpha=app.train.alpha,
        k=app.dataset.k,
        head=app.model.head,
        attention_position=app.model.attention_position,
        augmentation=app.augment.strategy,
        val_fraction=app.train.val_fraction,
        seed=seed,
    )
