"""Synthetic dataset generation."""

from pathlib import Path
from typing import Annotated

import typer

from fatigue_tool.data import SynthParams, synth_generate
from fatigue_tool.output import Column, OutputFormat, render
from fatigue_tool.utils import (
    ConfigOption,
    SeedOption,
    exit_on_error,
    get_config,
    get_seed,
    prepare_out_dir,
)


def synth(
    out: Annotated[Path, typer.Option("--out", "-o", help="Directory for clips and manifest")],
    n_videos: Annotated[
        int | None, typer.Option("--videos", "-n", min=1, help="Override synth.n_videos")
    ] = None,
    frames: Annotated[
        int | None, typer.Option("--frames", min=32, help="Override synth.frames")
    ] = None,
    polarized: Annotated[
        bool | None,
        typer.Option("--polarized/--no-polarized", help="Draw fatigue only from the extremes"),
    ] = None,
    format: Annotated[
        OutputFormat,
        typer.Option("--format", "-f", help="Output format"),
    ] = OutputFormat.table,
    config_file: ConfigOption = None,
    seed: SeedOption = None,
) -> None:
    """
    Generate a synthetic face-video dataset with per-video fatigue labels.

    Writes clips/<video>_<NNN>.vfc, manifest.tsv and videos.tsv under --out.

    Examples:
        fatigue-tool synth --out data
        fatigue-tool synth --seed 7 --out data
        fatigue-tool --seed 7 synth --out data -n 10 --frames 64 --polarized
    """
    with exit_on_error("synth"):
        config = get_config(config_file)
        params = SynthParams(
            n_videos=n_videos if n_videos is not None else config.synth.n_videos,
            frames=frames if frames is not None else config.synth.frames,
            image_size=config.synth.image_size,
            polarized=polarized if polarized is not None else config.synth.polarized,
            k=config.dataset.k,
            seed=get_seed(config, seed),
        )
        manifest = synth_generate(params, prepare_out_dir(out))

    labels = manifest.video_labels()
    rows = [
        {
            "class": str(c),
            "videos": str(sum(1 for v in labels.values() if v == c)),
            "clips": str(sum(1 for r in manifest.records if r.categorical == c)),
        }
        for c in range(params.k)
    ]
    columns = [
        Column("Class", "class", style="bold"),
        Column("Videos", "videos", justify="right"),
        Column("Clips", "clips", justify="right"),
    ]
    render(rows, format, columns=columns, footer=f"Wrote {len(manifest)} clips to {out}")
