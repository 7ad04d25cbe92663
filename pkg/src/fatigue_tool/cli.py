import sys
from pathlib import Path
from typing import Annotated

import typer

from fatigue_tool.__about__ import __version__
from fatigue_tool.commands import ablate, data, inspect, train, viz
from fatigue_tool.exceptions import EXIT_OK, EXIT_USAGE
from fatigue_tool.monitoring import setup_logging, setup_sentry
from fatigue_tool.utils import set_active_config, set_active_seed

app = typer.Typer(
    help="Fatigue Tool - Train and inspect clip-level driver fatigue models.",
    no_args_is_help=True,
)

app.command("synth")(data.synth)
app.command("train")(train.train_model)
app.command("eval")(train.eval_model)
app.command("cv")(train.cv)
app.command("ablate")(ablate.ablate)
app.command("gradcam")(viz.gradcam)
app.command("inflate")(inspect.inflate)
app.command("inspect")(inspect.inspect)

# Base of the usage errors raised by typer's click layer, bundled or installed.
_UsageFailure: type[Exception] = next(
    cls for cls in typer.BadParameter.__mro__ if cls.__name__ == "ClickException"
)


def version_callback(value: bool) -> None:
    if value:
        typer.echo(f"fatigue-tool {__version__}")
        raise typer.Exit()


@app.callback()
def callback(
    version: Annotated[
        bool,
        typer.Option(
            "--version",
            "-V",
            help="Show version and exit",
            callback=version_callback,
            is_eager=True,
        ),
    ] = False,
    config: Annotated[
        Path | None,
        typer.Option(
            "--config", "-c", help="Config file (default: ~/.config/fatigue-tool/fatigue.cfg)"
        ),
    ] = None,
    seed: Annotated[
        int | None,
        typer.Option(
            "--seed", "-s", min=0, help="Master seed; overrides FATIGUE_TOOL_SEED and train.seed"
        ),
    ] = None,
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Debug-level diagnostics")
    ] = False,
) -> None:
    """Handle global options before subcommand dispatch."""
    setup_logging(verbose)
    set_active_config(config)
    set_active_seed(seed)


def run(argv: list[str] | None = None) -> int:
    """Run the app and return its exit code instead of exiting."""
    args = sys.argv[1:] if argv is None else argv
    try:
        result = app(args, standalone_mode=False, prog_name="fatigue-tool")
    except typer.Exit as exc:
        return exc.exit_code
    except typer.Abort:
        return EXIT_USAGE
    except _UsageFailure as exc:
        exc.show()  # type: ignore[attr-defined]
        return EXIT_USAGE
    return result if isinstance(result, int) else EXIT_OK


def cli() -> None:
    """Configure logging and Sentry, then run the CLI app."""
    setup_logging()
    setup_sentry(environment="local")
    sys.exit(run())
