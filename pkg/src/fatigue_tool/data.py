"""Clips, manifests, the synthetic face-video generator, augmentation and fold splits.

A clip is 32 consecutive frames, stored T x C x H x W with values in [0, 1].
Clip files use the VFC1 container; manifests are tab-separated text.
"""

from __future__ import annotations

import struct
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sklearn.model_selection import KFold, StratifiedKFold, train_test_split

from fatigue_tool.exceptions import ContractViolationError, DataError
from fatigue_tool.heads import normalize_labels
from fatigue_tool.monitoring import get_logger
from fatigue_tool.tensor import Tensor

log = get_logger("data")

ClipArray = npt.NDArray[np.float32]
AugmentStrategy = Literal["none", "less", "more"]

CLIP_FRAMES = 32
CLIP_MAGIC = b"VFC1"
MANIFEST_NAME = "manifest.tsv"
VIDEOS_NAME = "videos.tsv"


@dataclass(frozen=True, eq=False)
class Clip:
    data: ClipArray
    video_id: str
    clip_index: int

    def __post_init__(self) -> None:
        if self.data.ndim != 4 or self.data.shape[0] != CLIP_FRAMES or self.data.shape[1] != 3:
            raise ContractViolationError(
                f"clip must be {CLIP_FRAMES} x 3 x H x W, got {self.data.shape}"
            )
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ContractViolationError("clip values must lie in [0, 1]")

    def tensor(self) -> Tensor:
        return Tensor(self.data)


# ===== VFC1 container =====


def write_clip_file(path: Path, data: npt.ArrayLike) -> None:
    """Write a 4-D array as VFC1: magic, four u32 extents, binary32 values (row-major)."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 4:
        raise ContractViolationError(f"clip files hold 4-D arrays, got shape {arr.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CLIP_MAGIC + struct.pack("<4I", *arr.shape) + arr.tobytes(order="C"))


def read_clip_file(path: Path) -> ClipArray:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read clip {path}: {exc}") from exc
    if blob[:4] != CLIP_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {CLIP_MAGIC!r}")
    if len(blob) < 20:
        raise DataError(f"{path}: header truncated")
    extents = struct.unpack("<4I", blob[4:20])
    expected = 4 * int(np.prod(extents))
    if len(blob) - 20 != expected:
        raise DataError(
            f"{path}: payload has {len(blob) - 20} bytes, extents {extents} need {expected}"
        )
    return np.frombuffer(blob, dtype="<f4", offset=20).reshape(extents).astype(np.float32)


def load_clip(path: Path, video_id: str, clip_index: int) -> Clip:
    data = read_clip_file(path)
    try:
        return Clip(data, video_id, clip_index)
    except ContractViolationError as exc:
        raise DataError(f"{path}: {exc}") from exc


# ===== Manifest =====


@dataclass(frozen=True)
class SampleRecord:
    clip_path: Path
    continuous: float
    categorical: int
    video_id: str
    subject_id: str

    @property
    def clip_index(self) -> int:
        """Trailing ``_NNN`` of the file stem, else 0."""
        _, _, tail = self.clip_path.stem.rpartition("_")
        return int(tail) if tail.isdigit() else 0


@dataclass
class Manifest:
    """Ordered sample records; relative clip paths resolve against ``root``."""

    records: list[SampleRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        labels: dict[str, tuple[float, int]] = {}
        for record in self.records:
            label = (record.continuous, record.categorical)
            previous = labels.setdefault(record.video_id, label)
            if previous != label:
                raise DataError(
                    f"video {record.video_id} carries two labels: {previous} and {label}"
                )

    def __len__(self) -> int:
        return len(self.records)

    def video_ids(self) -> list[str]:
        return sorted({r.video_id for r in self.records})

    def video_labels(self) -> dict[str, int]:
        return {r.video_id: r.categorical for r in self.records}

    def subset(self, video_ids: Iterable[str]) -> Manifest:
        wanted = set(video_ids)
        return Manifest([r for r in self.records if r.video_id in wanted], self.root)

    def resolve(self, record: SampleRecord) -> Path:
        return record.clip_path if record.clip_path.is_absolute() else self.root / record.clip_path

    def load(self, record: SampleRecord) -> Clip:
        return load_clip(self.resolve(record), record.video_id, record.clip_index)


def read_manifest(path: Path) -> Manifest:
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        clip_path, continuous, categorical, video_id, subject_id = fields
        try:
            record = SampleRecord(
                Path(clip_path), float(continuous), int(categorical), video_id, subject_id
            )
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if not 0.0 <= record.continuous <= 1.0 or record.categorical < 0:
            raise DataError(f"{path}:{lineno}: label out of range")
        records.append(record)
    return Manifest(records, path.parent)


def write_manifest(manifest: Manifest, path: Path) -> None:
    lines = ["# clip_path\tcontinuous_label\tcategorical_label\tvideo_id\tsubject_id"]
    lines.extend(
        f"{r.clip_path.as_posix()}\t{r.continuous!r}\t{r.categorical}\t{r.video_id}\t{r.subject_id}"
        for r in manifest.records
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ===== Synthetic generator =====


class SynthParams(BaseModel):
    """Schematic face videos whose blink rate falls and eyelid droop rises with fatigue."""

    model_config = ConfigDict(frozen=True)

    n_videos: int = Field(default=40, ge=1)
    frames: int = Field(default=96, ge=CLIP_FRAMES)
    image_size: int = Field(default=112, ge=16)
    fps: float = Field(default=10.0, gt=0.0)
    blink_rate_min: float = Field(default=0.3, gt=0.0, description="Blinks per second at fatigue 1")
    blink_rate_max: float = Field(default=1.5, gt=0.0, description="Blinks per second at fatigue 0")
    droop_max: float = Field(
        default=0.6, ge=0.0, lt=1.0, description="Eye closure fraction at fatigue 1"
    )
    yawn_rate_max: float = Field(default=0.1, ge=0.0, description="Yawns per second at fatigue 1")
    noise: float = Field(default=0.02, ge=0.0)
    n_subjects: int = Field(default=5, ge=1)
    k: int = Field(default=2, ge=1)
    polarized: bool = False
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_rates(self) -> SynthParams:
        if self.blink_rate_min > self.blink_rate_max:
            raise ValueError("blink_rate_min must not exceed blink_rate_max")
        return self


@dataclass(frozen=True)
class SynthVideo:
    video_id: str
    subject_id: str
    fatigue: float
    blink_rate: float
    droop: float


BLINK_PROFILE = np.array([0.4, 0.0, 0.0, 0.5])
YAWN_FRAMES = 12


def video_parameters(p: SynthParams, fatigue: float, index: int) -> SynthVideo:
    return SynthVideo(
        video_id=f"v{index:04d}",
        subject_id=f"s{index % p.n_subjects:02d}",
        fatigue=fatigue,
        blink_rate=p.blink_rate_max - fatigue * (p.blink_rate_max - p.blink_rate_min),
        droop=p.droop_max * fatigue,
    )


def _draw_fatigue(rng: np.random.Generator, polarized: bool) -> float:
    if not polarized:
        return float(rng.uniform(0.0, 1.0))
    # ratings <= 2 or >= 4 on the 1..5 scale
    low = rng.random() < 0.5
    return float(rng.uniform(0.0, 0.25) if low else rng.uniform(0.75, 1.0))


def _eye_openness(
    p: SynthParams, video: SynthVideo, rng: np.random.Generator
) -> npt.NDArray[np.float64]:
    period = p.fps / video.blink_rate
    phase = rng.uniform(0.0, period)
    since_blink = np.mod(np.arange(p.frames) - phase, period).astype(int)
    blink = np.ones(p.frames)
    closing = since_blink < BLINK_PROFILE.size
    blink[closing] = BLINK_PROFILE[since_blink[closing]]
    return (1.0 - video.droop) * blink


def _mouth_opening(
    p: SynthParams, video: SynthVideo, rng: np.random.Generator
) -> npt.NDArray[np.float64]:
    opening = np.zeros(p.frames)
    expected = p.yawn_rate_max * video.fatigue * p.frames / p.fps
    for start in rng.integers(0, p.frames, size=rng.poisson(expected)):
        span = np.arange(start, min(start + YAWN_FRAMES, p.frames))
        bump = np.sin(np.pi * (span - start + 0.5) / YAWN_FRAMES)
        opening[span] = np.maximum(opening[span], bump)
    return opening


def render_video(p: SynthParams, video: SynthVideo, rng: np.random.Generator) -> ClipArray:
    """Frames x 3 x S x S schematic face video for one parameter set."""
    s = p.image_size
    yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, s), np.linspace(-1.0, 1.0, s), indexing="ij")
    tone = rng.uniform(0.6, 0.85)
    eye_dx = rng.uniform(0.28, 0.36)

    def ellipse(cx: float, cy: float, rx: float, ry: float) -> npt.NDArray[np.bool_]:
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / max(ry, 1e-6)) ** 2 <= 1.0

    face = np.where(ellipse(0.0, 0.05, 0.75, 0.9), tone, 0.3)
    openness = _eye_openness(p, video, rng)
    mouth = _mouth_opening(p, video, rng)
    frames = np.empty((p.frames, 3, s, s), dtype=np.float32)
    for f in range(p.frames):
        gray = face.copy()
        for cx in (-eye_dx, eye_dx):
            gray[ellipse(cx, -0.2, 0.16, 0.02)] = 0.15
            gray[ellipse(cx, -0.2, 0.16, 0.1 * openness[f])] = 0.05
        gray[ellipse(0.0, 0.45, 0.22, 0.03 + 0.15 * mouth[f])] = 0.1
        gray = gray + rng.normal(0.0, p.noise, size=gray.shape)
        frames[f] = np.clip(gray * np.array([1.0, 0.95, 0.9])[:, None, None], 0.0, 1.0)
    return frames


def synth_generate(p: SynthParams, out_dir: Path) -> Manifest:
    """Render ``p.n_videos`` videos, split them into clips and write clips plus manifest.

    Every video draws from its own stream keyed by (seed, video index), so
    the output is bit-identical for identical parameters.
    """
    root = np.random.SeedSequence(p.seed)
    children = root.spawn(p.n_videos)
    records: list[SampleRecord] = []
    videos: list[SynthVideo] = []
    for index, child in enumerate(children):
        rng = np.random.default_rng(child)
        video = video_parameters(p, _draw_fatigue(rng, p.polarized), index)
        labels = normalize_labels(1.0 + 4.0 * video.fatigue, p.k)
        for clip in split_clips(render_video(p, video, rng), video.video_id):
            rel = Path("clips") / f"{video.video_id}_{clip.clip_index:03d}.vfc"
            write_clip_file(out_dir / rel, clip.data)
            records.append(
                SampleRecord(
                    rel, labels.continuous, labels.categorical, video.video_id, video.subject_id
                )
            )
        videos.append(video)
        log.debug("video_rendered", video_id=video.video_id, fatigue=round(video.fatigue, 4))

    manifest = Manifest(records, out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    _write_videos(videos, out_dir / VIDEOS_NAME)
    log.info("synth_done", videos=p.n_videos, clips=len(records), out=str(out_dir))
    return manifest


def _write_videos(videos: Sequence[SynthVideo], path: Path) -> None:
    lines = ["# video_id\tsubject_id\tfatigue\tblink_rate\tdroop"]
    lines.extend(
        f"{v.video_id}\t{v.subject_id}\t{v.fatigue!r}\t{v.blink_rate!r}\t{v.droop!r}"
        for v in videos
    )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_videos(path: Path) -> list[SynthVideo]:
    videos = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        video_id, subject_id, fatigue, rate, droop = line.split("\t")
        videos.append(SynthVideo(video_id, subject_id, float(fatigue), float(rate), float(droop)))
    return videos


# ===== Clip splitting =====


def split_clips(frames: npt.ArrayLike, video_id: str) -> list[Clip]:
    """Consecutive non-overlapping 32-frame clips; a trailing remainder is dropped."""
    video = np.asarray(frames, dtype=np.float32)
    if video.ndim != 4 or video.shape[0] < CLIP_FRAMES:
        raise ContractViolationError(f"need at least {CLIP_FRAMES} frames, got shape {video.shape}")
    count = video.shape[0] // CLIP_FRAMES
    return [
        Clip(video[i * CLIP_FRAMES : (i + 1) * CLIP_FRAMES].copy(), video_id, i)
        for i in range(count)
    ]


# ===== Augmentation =====


@dataclass(frozen=True)
class AugmentParams:
    """One draw of the transform pipeline; ``None`` marks a transform that did not fire."""

    flip: bool = False
    brightness_up: float | None = None
    brightness_down: float | None = None
    blur_sigma: float | None = None
    saturation: float | None = None
    contrast: float | None = None

    @property
    def is_identity(self) -> bool:
        return self == AugmentParams()


BRIGHTNESS_RANGE = (0.05, 0.2)
BLUR_SIGMA_RANGE = (0.3, 1.0)
FACTOR_RANGE = (0.7, 1.3)
LUMA = np.array([0.299, 0.587, 0.114])


def sample_augmentation(
    rng: np.random.Generator, strategy: AugmentStrategy = "more"
) -> AugmentParams:
    """Draw transform choices and magnitudes.

    ``more`` fires each of the six transforms independently with probability
    0.5; ``less`` picks one of identity, flip, brightness up, brightness down.
    """
    if strategy == "none":
        return AugmentParams()
    if strategy == "less":
        choice = int(rng.integers(4))
        magnitude = float(rng.uniform(*BRIGHTNESS_RANGE))
        return [
            AugmentParams(),
            AugmentParams(flip=True),
            AugmentParams(brightness_up=magnitude),
            AugmentParams(brightness_down=magnitude),
        ][choice]
    fires = rng.random(6) < 0.5
    up, down = rng.uniform(*BRIGHTNESS_RANGE, size=2)
    sigma = rng.uniform(*BLUR_SIGMA_RANGE)
    saturation, contrast = rng.uniform(*FACTOR_RANGE, size=2)
    return AugmentParams(
        flip=bool(fires[0]),
        brightness_up=float(up) if fires[1] else None,
        brightness_down=float(down) if fires[2] else None,
        blur_sigma=float(sigma) if fires[3] else None,
        saturation=float(saturation) if fires[4] else None,
        contrast=float(contrast) if fires[5] else None,
    )


def gaussian_blur(frames: npt.NDArray[np.float64], sigma: float) -> npt.NDArray[np.float64]:
    """Separable 3x3 gaussian over the last two axes with edge replication."""
    taps = np.exp(-(np.arange(-1, 2) ** 2) / (2.0 * sigma**2))
    taps /= taps.sum()
    h, w = frames.shape[-2:]
    pad = [(0, 0)] * (frames.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(frames, pad, mode="edge")
    rows = sum(taps[i] * padded[..., i : i + h, :] for i in range(3))
    return sum(taps[i] * rows[..., :, i : i + w] for i in range(3))  # type: ignore[return-value]


def apply_augmentation(data: npt.ArrayLike, params: AugmentParams) -> ClipArray:
    """Apply one parameter draw identically to every frame; the result is clamped to [0, 1]."""
    x = np.asarray(data, dtype=np.float64)
    if params.is_identity:
        return x.astype(np.float32)
    if params.flip:
        x = x[..., ::-1]
    if params.brightness_up is not None:
        x = x + params.brightness_up
    if params.brightness_down is not None:
        x = x - params.brightness_down
    if params.blur_sigma is not None:
        x = gaussian_blur(x, params.blur_sigma)
    if params.saturation is not None:
        luma = np.tensordot(LUMA, x, axes=([0], [-3]))[..., None, :, :]
        x = luma + params.saturation * (x - luma)
    if params.contrast is not None:
        frame_mean = x.mean(axis=(-3, -2, -1), keepdims=True)
        x = (x - frame_mean) * params.contrast + frame_mean
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def augment(clip: Clip, seed: int, strategy: AugmentStrategy = "more") -> Clip:
    """Pure function of (clip, seed): one parameter draw shared by all 32 frames."""
    params = sample_augmentation(np.random.default_rng(seed), strategy)
    return Clip(apply_augmentation(clip.data, params), clip.video_id, clip.clip_index)


# ===== Fold and holdout splits =====


def _video_table(manifest: Manifest) -> tuple[list[str], npt.NDArray[np.int64]]:
    labels = manifest.video_labels()
    videos = sorted(labels)
    return videos, np.array([labels[v] for v in videos], dtype=np.int64)


def kfold_split(manifest: Manifest, k: int = 5, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Video-level folds, stratified by categorical label.

    Falls back to unstratified folds when no class has ``k`` videos.
    """
    videos, labels = _video_table(manifest)
    if k < 2:
        raise ContractViolationError(f"k must be at least 2, got {k}")
    if len(videos) < k:
        raise ContractViolationError(f"{len(videos)} videos cannot fill {k} folds")
    ids = np.array(videos)
    splitter: StratifiedKFold | KFold = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    if np.bincount(labels).max() < k:
        log.warning("kfold_unstratified", videos=len(videos), k=k)
        splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        folds = [
            (sorted(ids[train].tolist()), sorted(ids[val].tolist()))
            for train, val in splitter.split(ids, labels)
        ]
    return folds


def holdout_split(
    manifest: Manifest, fraction: float, seed: int = 0
) -> tuple[list[str], list[str]]:
    """(train video ids, validation video ids), stratified when every class has two videos."""
    videos, labels = _video_table(manifest)
    if len(videos) < 2:
        raise ContractViolationError("a holdout split needs at least 2 videos")
    n_val = min(max(1, round(fraction * len(videos))), len(videos) - 1)
    counts = np.bincount(labels)
    n_classes = np.count_nonzero(counts)
    stratifiable = counts[counts > 0].min() >= 2 and min(n_val, len(videos) - n_val) >= n_classes
    stratify = labels if stratifiable else None
    train, val = train_test_split(videos, test_size=n_val, random_state=seed, stratify=stratify)
    return sorted(train), sorted(val)
