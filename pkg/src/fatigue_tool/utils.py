"""Helpers shared by the CLI commands: active config, seeds, error mapping."""

import zlib
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated

import numpy as np
import typer
from rich.console import Console

from fatigue_tool.config import AppConfig, load_config, resolve_seed
from fatigue_tool.exceptions import ContractViolationError, DataError, FatigueToolError
from fatigue_tool.monitoring import get_logger

SUB_SEEDS = ("data", "init", "shuffle", "augment")

_active_config_path: Path | None = None
_active_seed: int | None = None


def set_active_config(path: Path | None) -> None:
    global _active_config_path  # noqa: PLW0603
    _active_config_path = path


def set_active_seed(seed: int | None) -> None:
    global _active_seed  # noqa: PLW0603
    _active_seed = seed


# Per-command copies of the global --config and --seed; when given they win.
ConfigOption = Annotated[
    Path | None, typer.Option("--config", help="Config file; overrides the global --config")
]
SeedOption = Annotated[
    int | None, typer.Option("--seed", min=0, help="Master seed; overrides the global --seed")
]


def get_config(path: Path | None = None) -> AppConfig:
    return load_config(path if path is not None else _active_config_path)


def get_seed(config: AppConfig, seed: int | None = None) -> int:
    return resolve_seed(config, seed if seed is not None else _active_seed)


def derive_seed(master: int, name: str, *path: int) -> int:
    """Stable 32-bit seed for a named stream, optionally keyed further by integers."""
    if name not in SUB_SEEDS:
        raise ContractViolationError(f"unknown seed stream {name!r}; expected one of {SUB_SEEDS}")
    entropy = [master, zlib.crc32(name.encode("utf-8")), *path]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def stable_id(text: str) -> int:
    """Process-independent integer for a string key (``hash`` is salted per process)."""
    return zlib.crc32(text.encode("utf-8"))


def prepare_out_dir(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


@contextmanager
def exit_on_error(command: str) -> Iterator[None]:
    """Translate FatigueToolError into a red message and the error's exit code."""
    log = get_logger("cli")
    try:
        yield
    except FatigueToolError as exc:
        Console(stderr=True).print(f"[red]Error: {exc}[/red]")
        log.error("command_failed", command=command, error=str(exc), exit_code=exc.exit_code)
        raise typer.Exit(exc.exit_code) from None
