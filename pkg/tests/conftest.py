from pathlib import Path

import numpy as np
import pytest

from fatigue_tool.data import Manifest, SampleRecord, write_clip_file, write_manifest
from fatigue_tool.heads import LossConfig
from fatigue_tool.model import build_model
from fatigue_tool.monitoring import setup_logging

# Configure structlog once for the test session so log calls write to stderr
setup_logging()

TINY_SIZE = 112
TINY_WIDTH = 2


@pytest.fixture(autouse=True)
def _rebind_logging():
    """The CLI callback binds structlog to the runner's stderr; point it back afterwards."""
    yield
    setup_logging()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def write_dataset(
    root: Path, labels: list[int], clips_per_video: int = 1, seed: int = 0
) -> Manifest:
    """Noisy clips whose brightness follows the label, one video per label entry."""
    noise = np.random.default_rng(seed)
    records = []
    for i, label in enumerate(labels):
        video_id = f"v{i:04d}"
        for c in range(clips_per_video):
            rel = Path("clips") / f"{video_id}_{c:03d}.vfc"
            level = 0.3 + 0.4 * label
            jitter = 0.05 * noise.standard_normal((32, 3, TINY_SIZE, TINY_SIZE))
            data = np.clip(level + jitter, 0.0, 1.0)
            write_clip_file(root / rel, data)
            subject = f"s{i % 2:02d}"
            records.append(SampleRecord(rel, 0.125 + 0.75 * label, label, video_id, subject))
    manifest = Manifest(records, root)
    write_manifest(manifest, root / "manifest.tsv")
    return manifest


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Manifest:
    """Eight single-clip videos, four per class."""
    return write_dataset(tmp_path_factory.mktemp("tiny"), [0, 1] * 4)


@pytest.fixture(scope="session")
def five_video_dataset(tmp_path_factory) -> Manifest:
    return write_dataset(tmp_path_factory.mktemp("five"), [0, 1, 0, 1, 0])


@pytest.fixture
def make_model():
    """Factory for a narrow 112 x 112 model that keeps forward passes cheap."""

    def build(**overrides):
        kwargs = {"width": TINY_WIDTH, "seed": 0, "head": LossConfig()} | overrides
        return build_model(TINY_SIZE, **kwargs)

    return build
