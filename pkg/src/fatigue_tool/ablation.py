"""One-variable training sweeps and the continuous-vs-categorical head comparison."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from fatigue_tool.attention import AttentionPosition
from fatigue_tool.config import ModelSettings
from fatigue_tool.data import Manifest, holdout_split
from fatigue_tool.exceptions import ContractViolationError, FatigueToolError
from fatigue_tool.heads import predict
from fatigue_tool.metrics import (
    MetricsReport,
    binarize,
    build_report,
    ema_corrected,
    fatigue_probability,
)
from fatigue_tool.model import Backbone, ModelGraph, build_from_settings, inflate_state
from fatigue_tool.monitoring import get_logger
from fatigue_tool.training import (
    EpochRecord,
    TrainConfig,
    TrainResult,
    evaluate,
    train,
    write_curves,
)
from fatigue_tool.utils import derive_seed

log = get_logger("ablation")

AblationVariable = Literal["batch_size", "augmentation", "backbone", "attention_position", "loss"]

DEFAULT_VALUES: dict[str, tuple[str, ...]] = {
    "batch_size": ("8", "16", "32"),
    "augmentation": ("less", "more"),
    "backbone": ("2d", "3d", "3d_attention"),
    "attention_position": ("none", "after_block3", "after_block4"),
    "loss": ("continuous", "categorical"),
}
BACKBONE_RUNS = ("2d", "3d", "3d_attention", "3d_attention_transfer")
REPORT_COLUMNS = (
    "run",
    "max_train_loss",
    "min_train_loss",
    "max_val_loss",
    "min_val_loss",
    "total_epochs",
    "status",
)


class AblationSpec(BaseModel):
    """A sweep over the values of a single training or model setting."""

    model_config = ConfigDict(frozen=True)

    variable: AblationVariable
    values: tuple[str, ...] = Field(min_length=1)
    base: TrainConfig
    model: ModelSettings = Field(default_factory=ModelSettings)
    dataset: Path
    seed: int = Field(default=0, ge=0)
    ema_beta: float = Field(default=0.9, gt=0.0, lt=1.0)


@dataclass(frozen=True)
class RunPlan:
    label: str
    cfg: TrainConfig
    backbone: Backbone
    attention_position: AttentionPosition
    transfer: bool = False

    @property
    def slug(self) -> str:
        return self.label.replace(":", "_").replace("/", "_")


def _with(cfg: TrainConfig, **changes: Any) -> TrainConfig:
    try:
        return TrainConfig.model_validate(cfg.model_dump() | changes)
    except ValidationError as exc:
        fields = ", ".join(f"{k}={v!r}" for k, v in changes.items())
        msg = exc.errors()[0]["msg"]
        raise ContractViolationError(f"invalid ablation value ({fields}): {msg}") from exc


def plan_run(spec: AblationSpec, value: str) -> RunPlan:
    """Resolve one sweep value into the training config and model shape it trains."""
    cfg = _with(spec.base, seed=spec.seed)
    backbone: Backbone = spec.model.backbone
    attention: AttentionPosition = cfg.attention_position

    if spec.variable == "batch_size":
        try:
            size = int(value)
        except ValueError as exc:
            raise ContractViolationError(f"batch size must be an integer, got {value!r}") from exc
        cfg = _with(cfg, batch_size=size)
    elif spec.variable == "augmentation":
        cfg = _with(cfg, augmentation=value)
    elif spec.variable == "attention_position":
        cfg = _with(cfg, attention_position=value)
        attention = cfg.attention_position
    elif spec.variable == "loss":
        if value == "continuous":
            cfg = _with(cfg, head="continuous")
        elif value == "categorical":
            cfg = _with(cfg, head="categorical")
        elif value.startswith("categorical:"):
            try:
                alpha = float(value.split(":", 1)[1])
            except ValueError as exc:
                raise ContractViolationError(f"bad alpha in loss value {value!r}") from exc
            cfg = _with(cfg, head="categorical", alpha=alpha)
        else:
            raise ContractViolationError(
                f"loss value must be continuous, categorical or categorical:<alpha>, got {value!r}"
            )
    else:
        if value not in BACKBONE_RUNS:
            raise ContractViolationError(
                f"backbone value must be one of {', '.join(BACKBONE_RUNS)}, got {value!r}"
            )
        backbone = "2d" if value == "2d" else "3d"
        if value in ("2d", "3d"):
            attention = "none"
        elif attention == "none":
            attention = "after_block3"
        cfg = _with(cfg, attention_position=attention)
        return RunPlan(value, cfg, backbone, attention, transfer=value == "3d_attention_transfer")

    return RunPlan(value, cfg, backbone, attention)


def provenance(spec: AblationSpec, plan: RunPlan) -> dict[str, str]:
    """Every setting the run trained with, as flat ``key = value`` pairs."""
    entries = {f"train.{k}": str(v) for k, v in plan.cfg.model_dump().items()}
    model = spec.model.model_dump() | {
        "backbone": plan.backbone,
        "attention_position": plan.attention_position,
    }
    entries.update({f"model.{k}": str(v) for k, v in model.items()})
    entries.update(
        {
            "dataset.manifest": str(spec.dataset),
            "ablation.variable": spec.variable,
            "ablation.value": plan.label,
            "ablation.transfer": str(plan.transfer).lower(),
            "ablation.ema_beta": str(spec.ema_beta),
        }
    )
    return dict(sorted(entries.items()))


def write_provenance(entries: dict[str, str], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()), encoding="utf-8")


def write_smoothed(curves: list[EpochRecord], beta: float, path: Path) -> None:
    """CSV of raw and bias-corrected EMA train/val loss per epoch."""
    train_ema = ema_corrected([c.train_loss for c in curves], beta)
    val_ema = ema_corrected([c.val_loss for c in curves], beta)
    lines = ["epoch,train_loss,train_loss_ema,val_loss,val_loss_ema"]
    for c, te, ve in zip(curves, train_ema, val_ema, strict=True):
        lines.append(f"{c.epoch},{c.train_loss!r},{te!r},{c.val_loss!r},{ve!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class AblationRow:
    run: str
    max_train_loss: float = float("nan")
    min_train_loss: float = float("nan")
    max_val_loss: float = float("nan")
    min_val_loss: float = float("nan")
    total_epochs: int = 0
    status: str = "ok"

    @classmethod
    def from_curves(cls, run: str, curves: list[EpochRecord]) -> AblationRow:
        train_losses = [c.train_loss for c in curves]
        val_losses = [c.val_loss for c in curves]
        return cls(
            run=run,
            max_train_loss=max(train_losses),
            min_train_loss=min(train_losses),
            max_val_loss=max(val_losses),
            min_val_loss=min(val_losses),
            total_epochs=len(curves),
        )

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def cells(self) -> dict[str, str]:
        if not self.ok:
            return {c: "" for c in REPORT_COLUMNS} | {"run": self.run, "status": self.status}
        return {
            "run": self.run,
            "max_train_loss": f"{self.max_train_loss:.6f}",
            "min_train_loss": f"{self.min_train_loss:.6f}",
            "max_val_loss": f"{self.max_val_loss:.6f}",
            "min_val_loss": f"{self.min_val_loss:.6f}",
            "total_epochs": str(self.total_epochs),
            "status": self.status,
        }


@dataclass
class AblationReport:
    variable: str
    rows: list[AblationRow] = field(default_factory=list)
    results: dict[str, TrainResult] = field(default_factory=dict)

    def table_rows(self) -> list[dict[str, str]]:
        return [row.cells() for row in self.rows]

    def write_tsv(self, path: Path) -> None:
        lines = ["\t".join(REPORT_COLUMNS)]
        lines.extend("\t".join(cells[c] for c in REPORT_COLUMNS) for cells in self.table_rows())
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _split(manifest: Manifest, cfg: TrainConfig, seed: int) -> tuple[Manifest, Manifest]:
    train_ids, val_ids = holdout_split(manifest, cfg.val_fraction, derive_seed(seed, "data"))
    return manifest.subset(train_ids), manifest.subset(val_ids)


def _build(spec: AblationSpec, plan: RunPlan) -> ModelGraph:
    return build_from_settings(
        spec.model,
        plan.cfg.loss_config,
        derive_seed(spec.seed, "init"),
        backbone=plan.backbone,
        attention_position=plan.attention_position,
    )


def _pretrain_2d(
    spec: AblationSpec, plan: RunPlan, train_set: Manifest, val_set: Manifest
) -> dict[str, npt.NDArray[np.float32]]:
    base = RunPlan("2d", _with(plan.cfg, attention_position="none"), "2d", "none")
    log.info("transfer_pretrain", run=plan.label)
    return train(_build(spec, base), train_set, base.cfg, val_set).best_state


def run_ablation(spec: AblationSpec, manifest: Manifest, out_dir: Path) -> AblationReport:
    """Train once per value of ``spec.variable``; all runs share the same train/val split.

    Writes ``report.tsv`` plus, per run, ``runs/<NN>_<value>/`` holding
    ``curves.csv``, ``smoothed.csv`` and ``provenance.cfg``. A run that raises a
    FatigueToolError is logged and reported with an error status and the sweep
    continues; any other exception propagates.
    """
    plans = [plan_run(spec, v) for v in spec.values]
    train_set, val_set = _split(manifest, spec.base, spec.seed)
    report = AblationReport(variable=spec.variable)
    log.info(
        "ablation_started",
        variable=spec.variable,
        runs=len(plans),
        train=len(train_set),
        val=len(val_set),
    )

    for index, plan in enumerate(plans):
        run_dir = out_dir / "runs" / f"{index:02}_{plan.slug}"
        write_provenance(provenance(spec, plan), run_dir / "provenance.cfg")
        try:
            model = _build(spec, plan)
            if plan.transfer:
                weights2d = report.results["2d"].best_state if "2d" in report.results else None
                if weights2d is None:
                    weights2d = _pretrain_2d(spec, plan, train_set, val_set)
                model.load_state(inflate_state(weights2d, model, spec.model.inflation_mode))
            result = train(model, train_set, plan.cfg, val_set)
        except FatigueToolError as e:
            log.error("ablation_run_failed", run=plan.label, error=str(e))
            report.rows.append(AblationRow(run=plan.label, status=f"failed: {e}"))
            continue
        report.results[plan.label] = result
        report.rows.append(AblationRow.from_curves(plan.label, result.curves))
        write_curves(result.curves, run_dir / "curves.csv")
        write_smoothed(result.curves, spec.ema_beta, run_dir / "smoothed.csv")
        log.info(
            "ablation_run_done", run=plan.label, epochs=result.epochs, best_epoch=result.best_epoch
        )

    report.write_tsv(out_dir / "report.tsv")
    return report


# ===== Loss head comparison =====


@dataclass
class HeadComparison:
    val_loss: dict[str, float]
    val_accuracy: dict[str, float]
    metrics: MetricsReport
    results: dict[str, TrainResult] = field(default_factory=dict)

    def table_rows(self) -> list[dict[str, str]]:
        return [
            {
                "head": head,
                "min_val_loss": f"{loss:.6f}",
                "val_accuracy": f"{self.val_accuracy[head]:.4f}",
            }
            for head, loss in self.val_loss.items()
        ]

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = ["head\tmin_val_loss\tval_accuracy"]
        lines.extend("\t".join(row.values()) for row in self.table_rows())
        (out_dir / "loss_heads.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (out_dir / "metrics.txt").write_text(self.metrics.to_text(), encoding="utf-8")
        roc = ["curve,fpr,tpr"]
        for name, curve in self.metrics.curves.items():
            roc.extend(f"{name},{f!r},{t!r}" for f, t in curve)
        (out_dir / "roc.csv").write_text("\n".join(roc) + "\n", encoding="utf-8")


def compare_loss_heads(
    manifest: Manifest,
    base: TrainConfig,
    model: ModelSettings,
    out_dir: Path,
    seed: int = 0,
) -> HeadComparison:
    """Train the continuous and the categorical head on the same split and compare them.

    Polarity metrics and ROC curves come from the categorical head's
    validation predictions; the fatigue score is the probability mass on
    the upper half of the bins.
    """
    train_set, val_set = _split(manifest, base, seed)
    spec = AblationSpec(
        variable="loss",
        values=("continuous", "categorical"),
        base=base,
        model=model,
        dataset=manifest.root,
        seed=seed,
    )
    val_loss: dict[str, float] = {}
    val_accuracy: dict[str, float] = {}
    results: dict[str, TrainResult] = {}
    graphs: dict[str, ModelGraph] = {}
    for head, value in (("continuous", "continuous"), ("categorical", f"categorical:{base.alpha}")):
        plan = plan_run(spec, value)
        graphs[head] = _build(spec, plan)
        result = train(graphs[head], train_set, plan.cfg, val_set)
        results[head] = result
        val_loss[head] = min(c.val_loss for c in result.curves)
        val_accuracy[head] = result.curves[result.best_epoch].val_accuracy

    loss_cfg = graphs["categorical"].head
    out = evaluate(graphs["categorical"], val_set, loss_cfg, base.batch_size)
    pred = predict(out.logits, loss_cfg)
    comparison = HeadComparison(
        val_loss=val_loss,
        val_accuracy=val_accuracy,
        metrics=build_report(
            binarize(pred.classes, base.k),
            binarize([r.categorical for r in out.records], base.k),
            fatigue_probability(pred.scores, base.k),
        ),
        results=results,
    )
    comparison.write(out_dir)
    losses = {f"{h}_min_val_loss": round(v, 6) for h, v in comparison.val_loss.items()}
    log.info("loss_heads_compared", **losses)
    return comparison
