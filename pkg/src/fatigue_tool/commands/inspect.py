"""Model inspection and 2D-to-3D weight inflation."""

from pathlib import Path
from typing import Annotated

import typer
from rich.console import Console

from fatigue_tool.config import with_overrides
from fatigue_tool.model import (
    CLIP_LEN,
    IN_CHANNELS,
    format_feature_shape,
    inflate_state,
    load_weights,
    save_weights,
    shape_trace,
)
from fatigue_tool.output import Column, OutputFormat, render
from fatigue_tool.services import configured_model
from fatigue_tool.utils import (
    ConfigOption,
    SeedOption,
    exit_on_error,
    get_config,
    get_seed,
    prepare_out_dir,
)


def inspect(
    input_size: Annotated[
        int | None, typer.Option("--input-size", help="Override model.input_size (112 or 224)")
    ] = None,
    format: Annotated[
        OutputFormat, typer.Option("--format", "-f", help="Output format")
    ] = OutputFormat.table,
    config_file: ConfigOption = None,
    seed: SeedOption = None,
) -> None:
    """
    Print the per-layer feature shapes of one clip and the parameter count.

    Shapes read frames x height x width x channels.

    Examples:
        fatigue-tool --config c.cfg inspect
        fatigue-tool inspect --config c.cfg
        fatigue-tool inspect --input-size 224 --format json
    """
    with exit_on_error("inspect"):
        config = get_config(config_file)
        if input_size is not None:
            config = with_overrides(config, model__input_size=input_size)
        model = configured_model(config, get_seed(config, seed))
        size = config.model.input_size
        trace = shape_trace(model, (CLIP_LEN, IN_CHANNELS, size, size))

    rows = [{"layer": name, "shape": format_feature_shape(shape)} for name, shape in trace]
    columns = [
        Column("Layer", "layer", style="bold"),
        Column("Shape (TxHxWxC)", "shape", justify="right"),
    ]
    render(
        rows,
        format,
        columns=columns,
        footer=f"{model.parameter_count():,} parameters "
        f"({model.backbone}, attention {model.attention_position})",
    )


def inflate(
    weights: Annotated[
        Path, typer.Option("--weights", "-w", help="Weights of a 2d-backbone model")
    ],
    out: Annotated[Path, typer.Option("--out", "-o", help="Directory for the inflated weights")],
    mode: Annotated[
        str | None,
        typer.Option(
            "--mode", help="replicate_divide or replicate (default: model.inflation_mode)"
        ),
    ] = None,
    config_file: ConfigOption = None,
    seed: SeedOption = None,
) -> None:
    """
    Inflate 2D convolution kernels to the configured 3D model and save weights.nlw.

    Non-convolution tensors are copied; attention parameters keep their
    initial values.

    Examples:
        fatigue-tool inflate --weights runs/2d/weights.nlw --out runs/inflated
    """
    with exit_on_error("inflate"):
        config = get_config(config_file)
        model = configured_model(config, get_seed(config, seed), backbone="3d")
        if mode is not None:
            config = with_overrides(config, model__inflation_mode=mode)
        state = inflate_state(load_weights(weights), model, config.model.inflation_mode)
        model.load_state(state)
        target = prepare_out_dir(out) / "weights.nlw"
        save_weights(model, target)

    Console().print(f"Wrote {len(state)} tensors to {target}")
