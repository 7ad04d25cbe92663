"""Grad-CAM heatmaps for a single clip."""

from pathlib import Path
from typing import Annotated

import typer
from rich.console import Console

from fatigue_tool.data import write_clip_file
from fatigue_tool.model import GRADCAM_LAYER
from fatigue_tool.services import clip_from_path, trained_model
from fatigue_tool.utils import (
    ConfigOption,
    SeedOption,
    exit_on_error,
    get_config,
    get_seed,
    prepare_out_dir,
)
from fatigue_tool.viz import export_heatmaps, grad_cam_3d, guided_grad_cam, upsample_map


def gradcam(
    weights: Annotated[Path, typer.Option("--weights", "-w", help="Trained weights file")],
    clip: Annotated[Path, typer.Option("--clip", "-c", help="Clip file (VFC1)")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Directory for heatmap images")],
    target_class: Annotated[
        int, typer.Option("--class", help="Class whose evidence is mapped")
    ] = 1,
    layer: Annotated[str, typer.Option("--layer", "-l", help="Tapped layer name")] = GRADCAM_LAYER,
    guided: Annotated[
        bool,
        typer.Option("--guided", help="Also write guided Grad-CAM saliency as <clip>_guided.vfc"),
    ] = False,
    config_file: ConfigOption = None,
    seed: SeedOption = None,
) -> None:
    """
    Write per-frame Grad-CAM overlays (PPM), raw maps (PGM) and the map as VFC1.

    Examples:
        fatigue-tool gradcam -w runs/a/weights.nlw -c data/clips/v003_001.vfc --out cams
        fatigue-tool gradcam -w runs/a/weights.nlw -c data/clips/v003_001.vfc --class 0 --guided \
            --out cams
    """
    with exit_on_error("gradcam"):
        config = get_config(config_file)
        model = trained_model(config, get_seed(config, seed), weights)
        sample = clip_from_path(clip)
        out = prepare_out_dir(out)
        amap = upsample_map(grad_cam_3d(model, sample, target_class, layer), sample)
        written = export_heatmaps(amap, sample, out)
        if guided:
            path = out / f"{sample.video_id}_{sample.clip_index}_guided.vfc"
            write_clip_file(path, guided_grad_cam(model, sample, target_class, layer))
            written.append(path)

    peak = float(amap.values.max())
    Console().print(
        f"Wrote {len(written)} files to {out} "
        f"(layer {layer}, class {target_class}, peak {peak:.4g})"
    )
