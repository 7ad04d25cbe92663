"""Configuration loading with layered precedence.

Sources, highest priority first:
1. CLI flags (--config, --seed)
2. Environment variables (FATIGUE_TOOL_SEED, FATIGUE_TOOL_SENTRY_DSN)
3. Config file (explicit path, else ~/.config/fatigue-tool/fatigue.cfg)
4. Default values

The config file is plain ``key = value`` text, one setting per line, with
``#`` comment lines. Keys are ``section.field`` (``train.lr``); the only
top-level key is ``sentry_dsn``.
"""

from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from fatigue_tool.exceptions import ConfigurationError


def default_config_path() -> Path:
    return Path.home() / ".config" / "fatigue-tool" / "fatigue.cfg"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _supported_size(value: int) -> int:
    if value not in (112, 224):
        raise ValueError(f"must be 112 or 224, got {value}")
    return value


class DatasetSettings(_Section):
    dir: Path = Field(default=Path("data"), description="Directory holding clips and manifest")
    manifest: Path | None = Field(
        default=None, description="Manifest path; defaults to dir/manifest.tsv"
    )
    k: int = Field(default=2, ge=2, description="Number of ordered fatigue classes")

    def manifest_path(self) -> Path:
        return self.manifest if self.manifest is not None else self.dir / "manifest.tsv"


class TrainSettings(_Section):
    lr: float = Field(default=1e-5, gt=0.0, description="Base learning rate")
    weight_decay: float = Field(default=0.001, ge=0.0, description="L2 term added to gradients")
    batch_size: int = Field(default=32, ge=2)
    patience: int = Field(default=20, ge=1, description="Epochs without a new val-loss minimum")
    total_iterations: int | None = Field(
        default=None, ge=1, description="Iteration count the LR schedule is laid out over"
    )
    seed: int = Field(default=0, ge=0)
    alpha: float = Field(
        default=1.0, ge=0.0, description="Cross-entropy weight in the combined loss"
    )
    max_epochs: int = Field(default=200, ge=1)
    val_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)


class ModelSettings(_Section):
    input_size: int = Field(default=112, description="Frame height and width: 112 or 224")
    attention_position: Literal["after_block3", "after_block4", "none"] = "after_block3"
    head: Literal["continuous", "categorical"] = "categorical"
    inflation_mode: Literal["replicate_divide", "replicate"] = "replicate_divide"
    backbone: Literal["2d", "3d"] = "3d"
    width: int = Field(default=64, ge=1, description="Base channel count of stage 1")
    stem_temporal: int = Field(default=5, ge=1)
    bottleneck_ratio: float = Field(default=0.5, gt=0.0, le=1.0)
    activation: Literal["identity", "relu"] = "identity"

    @field_validator("input_size")
    @classmethod
    def _check_input_size(cls, value: int) -> int:
        return _supported_size(value)


class AugmentSettings(_Section):
    strategy: Literal["none", "less", "more"] = "more"


class SynthSettings(_Section):
    n_videos: int = Field(default=40, ge=1)
    frames: int = Field(default=96, ge=32)
    image_size: int = Field(default=112, description="Frame height and width: 112 or 224")
    polarized: bool = False

    @field_validator("image_size")
    @classmethod
    def _check_image_size(cls, value: int) -> int:
        return _supported_size(value)


class MetricsSettings(_Section):
    ema_beta: float = Field(default=0.9, gt=0.0, lt=1.0)


class AppConfig(_Section):
    """Every setting the CLI reads, grouped by section."""

    dataset: DatasetSettings = Field(default_factory=DatasetSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    augment: AugmentSettings = Field(default_factory=AugmentSettings)
    synth: SynthSettings = Field(default_factory=SynthSettings)
    metrics: MetricsSettings = Field(default_factory=MetricsSettings)
    sentry_dsn: str | None = Field(default=None, description="Enables crash reporting when set")

    def to_lines(self) -> list[str]:
        """Fully resolved ``key = value`` lines, sorted by key."""
        lines = []
        for key in sorted(KNOWN_KEYS):
            section, _, name = key.partition(".")
            value = getattr(getattr(self, section), name) if name else getattr(self, section)
            lines.append(f"{key} = {'' if value is None else value}")
        return lines


SECTIONS: dict[str, type[BaseModel]] = {
    "dataset": DatasetSettings,
    "train": TrainSettings,
    "model": ModelSettings,
    "augment": AugmentSettings,
    "synth": SynthSettings,
    "metrics": MetricsSettings,
}
KNOWN_KEYS: frozenset[str] = frozenset(
    {f"{section}.{name}" for section, model in SECTIONS.items() for name in model.model_fields}
    | {"sentry_dsn"}
)


class EnvOverrides(BaseSettings):
    """FATIGUE_TOOL_* environment variables that override the config file."""

    model_config = SettingsConfigDict(env_prefix="FATIGUE_TOOL_", extra="ignore")

    seed: int | None = None
    sentry_dsn: str | None = None


def parse_config_text(text: str, source: str = "<config>") -> AppConfig:
    """Parse ``key = value`` lines. Unknown keys and malformed lines name their line number."""
    raw: dict[str, Any] = {}
    lines_of: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in lines_of:
            raise ConfigurationError(
                f"{source}:{lineno}: {key!r} already set on line {lines_of[key]}"
            )
        lines_of[key] = lineno
        section, _, name = key.partition(".")
        if name:
            raw.setdefault(section, {})[name] = value.strip() or None
        else:
            raw[section] = value.strip() or None

    try:
        return AppConfig.model_validate(raw)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(part) for part in error["loc"])
        where = f"{source}:{lines_of[key]}" if key in lines_of else source
        raise ConfigurationError(f"{where}: {key}: {error['msg']}") from exc


def load_config(config_path: Path | None = None) -> AppConfig:
    """Search order: explicit path > ~/.config/fatigue-tool/fatigue.cfg > defaults.

    An explicit path that does not exist is an error; a missing default file is not.
    """
    if config_path is not None:
        if not config_path.is_file():
            raise ConfigurationError(f"config file not found: {config_path}")
        return _read(config_path)
    default = default_config_path()
    if default.is_file():
        return _read(default)
    return AppConfig()


def _read(path: Path) -> AppConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def resolve_seed(config: AppConfig, cli_seed: int | None = None) -> int:
    """Precedence: --seed flag > FATIGUE_TOOL_SEED > train.seed."""
    if cli_seed is not None:
        return cli_seed
    try:
        env_seed = EnvOverrides().seed
    except ValidationError as exc:
        msg = exc.errors()[0]["msg"]
        raise ConfigurationError(f"FATIGUE_TOOL_SEED is not an integer: {msg}") from exc
    if env_seed is not None:
        return env_seed
    return config.train.seed


def with_overrides(config: AppConfig, **keys: Any) -> AppConfig:
    """Copy of ``config`` with dotted keys (``model__input_size=224``) replaced and revalidated."""
    raw = config.model_dump()
    for dunder, value in keys.items():
        section, _, name = dunder.partition("__")
        key = f"{section}.{name}" if name else section
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"unknown key {key}")
        if name:
            raw[section][name] = value
        else:
            raw[section] = value
    try:
        return AppConfig.model_validate(raw)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(p) for p in error["loc"])
        raise ConfigurationError(f"{key}: {error['msg']}") from exc
