"""Ablation sweeps."""

from enum import Enum
from pathlib import Path
from typing import Annotated

import typer

from fatigue_tool.ablation import (
    DEFAULT_VALUES,
    REPORT_COLUMNS,
    AblationSpec,
    compare_loss_heads,
    run_ablation,
)
from fatigue_tool.output import OutputFormat, numeric_columns, render
from fatigue_tool.services import resolve_manifest
from fatigue_tool.training import config_from_app
from fatigue_tool.utils import (
    ConfigOption,
    SeedOption,
    exit_on_error,
    get_config,
    get_seed,
    prepare_out_dir,
)


class AblationTarget(str, Enum):
    batch_size = "batch_size"
    augmentation = "augmentation"
    backbone = "backbone"
    attention_position = "attention_position"
    loss = "loss"
    heads = "heads"


def ablate(
    variable: Annotated[
        AblationTarget, typer.Argument(help="Setting to sweep, or 'heads' to compare loss heads")
    ],
    out: Annotated[
        Path, typer.Option("--out", "-o", help="Directory for reports and per-run curves")
    ],
    values: Annotated[
        str | None,
        typer.Option("--values", help="Comma-separated values (default depends on the variable)"),
    ] = None,
    manifest: Annotated[
        Path | None, typer.Option("--manifest", "-m", help="Manifest TSV (default: from config)")
    ] = None,
    format: Annotated[
        OutputFormat, typer.Option("--format", "-f", help="Output format")
    ] = OutputFormat.table,
    config_file: ConfigOption = None,
    seed: SeedOption = None,
) -> None:
    """
    Train once per value of a single setting, holding everything else fixed.

    Backbone values: 2d, 3d, 3d_attention, 3d_attention_transfer.
    Loss values: continuous, categorical, categorical:<alpha>.

    Examples:
        fatigue-tool ablate attention_position --out runs/attn
        fatigue-tool ablate batch_size --values 4,8 --out runs/bs
        fatigue-tool ablate heads --out runs/heads
    """
    with exit_on_error("ablate"):
        config = get_config(config_file)
        seed = get_seed(config, seed)
        base = config_from_app(config, seed)
        data = resolve_manifest(config, manifest)
        out = prepare_out_dir(out)

        if variable is AblationTarget.heads:
            comparison = compare_loss_heads(data, base, config.model, out, seed)
            rows = comparison.table_rows()
            footer = f"Categorical AUC {comparison.metrics.aucs.get('average', float('nan')):.4f}"
            render(rows, format, columns=numeric_columns(list(rows[0]), "head"), footer=footer)
            return

        chosen = tuple(v.strip() for v in values.split(",") if v.strip()) if values else ()
        spec = AblationSpec(
            variable=variable.value,
            values=chosen or DEFAULT_VALUES[variable.value],
            base=base,
            model=config.model,
            dataset=config.dataset.manifest_path() if manifest is None else manifest,
            seed=seed,
            ema_beta=config.metrics.ema_beta,
        )
        report = run_ablation(spec, data, out)

    failed = sum(1 for row in report.rows if not row.ok)
    render(
        report.table_rows(),
        format,
        columns=numeric_columns(list(REPORT_COLUMNS), "run"),
        footer=f"{len(report.rows) - failed} runs finished, {failed} failed",
    )
    if failed == len(report.rows):
        raise typer.Exit(1)
