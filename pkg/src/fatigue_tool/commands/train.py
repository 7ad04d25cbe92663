"""Training, evaluation and cross-validation commands."""

from pathlib import Path
from typing import Annotated

import typer
from rich.console import Console

from fatigue_tool.heads import predict
from fatigue_tool.metrics import binarize, build_report, fatigue_probability, video_level
from fatigue_tool.model import load_weights, save_weights
from fatigue_tool.monitoring import get_logger
from fatigue_tool.output import OutputFormat, numeric_columns, render
from fatigue_tool.services import configured_model, loss_config, resolve_manifest, trained_model
from fatigue_tool.training import (
    FOLD_COLUMNS,
    EpochRecord,
    config_from_app,
    cross_validate,
    evaluate,
    train,
    write_curves,
    write_loss_terms,
)
from fatigue_tool.utils import (
    ConfigOption,
    SeedOption,
    exit_on_error,
    get_config,
    get_seed,
    prepare_out_dir,
)

log = get_logger("commands.train")

ManifestOption = Annotated[
    Path | None, typer.Option("--manifest", "-m", help="Manifest TSV (default: from config)")
]
OutOption = Annotated[Path, typer.Option("--out", "-o", help="Directory for all outputs")]
FormatOption = Annotated[OutputFormat, typer.Option("--format", "-f", help="Output format")]


def train_model(
    out: OutOption,
    manifest: ManifestOption = None,
    init_weights: Annotated[
        Path | None,
        typer.Option("--weights", "-w", help="Initial weights, e.g. from `fatigue-tool inflate`"),
    ] = None,
    config_file: ConfigOption = None,
    seed: SeedOption = None,
) -> None:
    """
    Train a model and write curves.csv, loss_terms.csv, weights.nlw and config.cfg under --out.

    The weights file holds the parameters of the epoch with the lowest
    validation loss.

    Examples:
        fatigue-tool --config run.cfg train --out runs/a
        fatigue-tool train --out runs/b --weights runs/inflated/weights.nlw
    """
    console = Console()
    with exit_on_error("train"):
        config = get_config(config_file)
        seed = get_seed(config, seed)
        cfg = config_from_app(config, seed)
        data = resolve_manifest(config, manifest)
        out = prepare_out_dir(out)
        model = configured_model(config, seed)
        if init_weights is not None:
            model.load_state(load_weights(init_weights))

        def progress(record: EpochRecord) -> None:
            console.print(
                f"epoch {record.epoch:3d}  train {record.train_loss:.4f}  "
                f"val {record.val_loss:.4f}  acc {record.val_accuracy:.3f}"
            )

        result = train(model, data, cfg, on_epoch=progress)
        write_curves(result.curves, out / "curves.csv")
        write_loss_terms(result.curves, out / "loss_terms.csv")
        save_weights(model, out / "weights.nlw")
        provenance = [*config.to_lines(), f"# seed = {seed}"]
        (out / "config.cfg").write_text("\n".join(provenance) + "\n", encoding="utf-8")

    log.info("train_done", out=str(out), epochs=result.epochs, best_epoch=result.best_epoch)
    best = result.curves[result.best_epoch]
    stop = "early stop" if result.stopped_early else "epoch limit"
    console.print(
        f"\nBest epoch {best.epoch}: val loss {best.val_loss:.4f}, "
        f"accuracy {best.val_accuracy:.3f} ({stop})"
    )


def eval_model(
    weights: Annotated[Path, typer.Option("--weights", "-w", help="Trained weights file")],
    out: OutOption,
    manifest: ManifestOption = None,
    format: FormatOption = OutputFormat.table,
    config_file: ConfigOption = None,
    seed: SeedOption = None,
) -> None:
    """
    Evaluate trained weights on a held-out manifest.

    Clip-level metrics take fatigue and alert as positive in turn and average
    the two; video-level metrics use the mean fatigue score of each video's
    clips. Writes metrics.txt, video_metrics.txt and predictions.tsv.

    Examples:
        fatigue-tool eval --weights runs/a/weights.nlw --manifest data/test.tsv --out runs/a/eval
    """
    with exit_on_error("eval"):
        config = get_config(config_file)
        seed = get_seed(config, seed)
        data = resolve_manifest(config, manifest)
        out = prepare_out_dir(out)
        model = trained_model(config, seed, weights)
        head = loss_config(config)
        result = evaluate(model, data, head, batch_size=config.train.batch_size)
        pred = predict(result.logits, head)
        scores = fatigue_probability(pred.scores, head.k, head.head)
        truth = binarize([r.categorical for r in result.records], head.k)
        report = build_report(binarize(pred.classes, head.k), truth, scores)
        (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")

        video_ids = [r.video_id for r in result.records]
        ids, video_scores, video_truth = video_level(video_ids, scores, truth)
        video_report = build_report((video_scores >= 0.5).astype(int), video_truth, video_scores)
        (out / "video_metrics.txt").write_text(video_report.to_text(), encoding="utf-8")

        lines = ["clip_path\tvideo_id\tcategorical_label\tpredicted_class\tfatigue_score"]
        lines.extend(
            f"{r.clip_path.as_posix()}\t{r.video_id}\t{r.categorical}\t{c}\t{s!r}"
            for r, c, s in zip(result.records, pred.classes, scores, strict=True)
        )
        (out / "predictions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    rows = report.table_rows()
    render(
        rows,
        format,
        columns=numeric_columns(list(rows[0]), "treatment"),
        footer=f"{report.samples} clips, loss {result.loss:.4f}, {len(ids)} videos; "
        f"AUC {report.aucs.get('average', float('nan')):.4f}",
    )


def cv(
    out: OutOption,
    manifest: ManifestOption = None,
    folds: Annotated[int, typer.Option("--folds", "-k", help="Number of video-level folds")] = 5,
    format: FormatOption = OutputFormat.table,
    config_file: ConfigOption = None,
    seed: SeedOption = None,
) -> None:
    """
    Run k-fold cross-validation with a freshly initialised model per fold.

    Writes cv_report.tsv and fold<N>/curves.csv under --out.

    Examples:
        fatigue-tool cv --out runs/cv
        fatigue-tool --seed 7 cv --out runs/cv -k 3 --format json
    """
    with exit_on_error("cv"):
        config = get_config(config_file)
        seed = get_seed(config, seed)
        cfg = config_from_app(config, seed)
        data = resolve_manifest(config, manifest)
        out = prepare_out_dir(out)
        report = cross_validate(data, cfg, lambda: configured_model(config, seed), k=folds)
        report.write_tsv(out / "cv_report.tsv")
        for fold, curves in enumerate(report.curves):
            write_curves(curves, out / f"fold{fold}" / "curves.csv")

    render(
        report.rows(),
        format,
        columns=numeric_columns(list(FOLD_COLUMNS), "fold"),
        footer=f"Mean min val loss {report.mean_min_val_loss:.6f}",
    )
