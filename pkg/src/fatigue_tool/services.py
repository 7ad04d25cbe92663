"""Glue shared by the CLI commands: manifests, configured models, clip files."""

from pathlib import Path

from fatigue_tool.config import AppConfig
from fatigue_tool.data import Clip, Manifest, SampleRecord, load_clip, read_manifest
from fatigue_tool.heads import LossConfig
from fatigue_tool.model import Backbone, ModelGraph, build_from_settings, load_weights
from fatigue_tool.monitoring import get_logger
from fatigue_tool.utils import derive_seed

log = get_logger("services")


def resolve_manifest(config: AppConfig, path: Path | None) -> Manifest:
    """``--manifest`` if given, else ``dataset.manifest`` / ``dataset.dir``/manifest.tsv."""
    manifest = read_manifest(path if path is not None else config.dataset.manifest_path())
    log.debug(
        "manifest_loaded",
        root=str(manifest.root),
        clips=len(manifest),
        videos=len(manifest.video_ids()),
    )
    return manifest


def loss_config(config: AppConfig) -> LossConfig:
    return LossConfig(alpha=config.train.alpha, k=config.dataset.k, head=config.model.head)


def configured_model(config: AppConfig, seed: int, backbone: Backbone | None = None) -> ModelGraph:
    return build_from_settings(
        config.model, loss_config(config), derive_seed(seed, "init"), backbone=backbone
    )


def trained_model(config: AppConfig, seed: int, weights: Path) -> ModelGraph:
    """Configured model with every parameter and running statistic replaced from ``weights``."""
    model = configured_model(config, seed)
    model.load_state(load_weights(weights))
    return model


def clip_from_path(path: Path) -> Clip:
    """Load a clip file, taking video id and clip index from a ``<video>_<NNN>`` stem."""
    index = SampleRecord(path, 0.0, 0, "", "").clip_index
    video_id, sep, tail = path.stem.rpartition("_")
    return load_clip(path, video_id if sep and tail.isdigit() else path.stem, index)
