"""
Command Line Interface for model-uncertainty.

This module provides commands for generating synthetic press data,
selecting sensors, screening measurement errors, testing candidate models
and running the whole pipeline.
"""

import sys
from collections.abc import Callable
from functools import wraps
from pathlib import Path
from typing import Any, TypeVar

import click
from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from ._version import __version__
from .config import CANDIDATE_FRICTION_MODELS, RunConfig, load_config
from .exceptions import ModelUncertaintyError, PipelineStageError
from .logging import configure_logging, get_logger
from .measurements import export_measurements
from .metrics import get_solver_stats
from .oed import DesignCriterion, DesignEvaluation
from .pipeline import (
    acquire,
    detect_candidate,
    prepare,
    run_pipeline,
    screen_measurements,
    select_design,
    stage,
    train_friction,
)
from .stats import NormalityScreen, UncertaintyReport

# Initialize Rich console
console = Console()
logger = get_logger(__name__)

F = TypeVar("F", bound=Callable[..., Any])


def handle_errors(func: F) -> F:
    """Map package errors onto their exit codes."""

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except PipelineStageError as e:
            console.print(f"[red]❌ Stage '{e.stage}' failed: {e.cause}[/red]")
            sys.exit(e.exit_code)
        except ModelUncertaintyError as e:
            console.print(f"[red]❌ {type(e).__name__}: {e}[/red]")
            sys.exit(e.exit_code)
        finally:
            logger.info("Solver statistics", **get_solver_stats())

    return wrapper  # type: ignore[return-value]


def _config(ctx: click.Context, **overrides: Any) -> RunConfig:
    return load_config(ctx.obj.get("config_path"), **overrides)


def _design_table(designs: list[DesignEvaluation], selected: DesignEvaluation) -> Table:
    table = Table(
        title="[bold blue]Sensor designs[/bold blue]",
        show_header=True,
        header_style="bold magenta",
    )
    table.add_column("ω", style="cyan", no_wrap=True)
    table.add_column("Feasible", style="green")
    table.add_column("Ψ_A")
    table.add_column("Ψ_D")
    table.add_column("Ψ_E")
    table.add_column("Note", style="dim")

    def fmt(value: float | None) -> str:
        return "-" if value is None else f"{value:.4g}"

    for design in designs:
        marker = "★ selected" if design.omega == selected.omega else ""
        table.add_row(
            design.label,
            "✅" if design.feasible else "❌",
            fmt(design.psi_a),
            fmt(design.psi_d),
            fmt(design.psi_e),
            marker or (design.reason or ""),
        )
    return table


def _normality_table(screen: NormalityScreen, names: list[str]) -> Table:
    table = Table(
        title=f"[bold blue]Normality screen (level {screen.level:g})[/bold blue]",
        show_header=True,
        header_style="bold magenta",
    )
    table.add_column("Sensor", style="cyan")
    table.add_column("n")
    table.add_column("W")
    table.add_column("p-value")
    table.add_column("σ̂ [µm]")
    table.add_column("Result")
    for result in screen.results:
        table.add_row(
            names[result.sensor],
            str(result.n),
            f"{result.w:.4f}",
            f"{result.p_value:.4f}",
            f"{result.sigma_hat * 1e6:.3f}",
            "[red]rejected[/red]" if result.rejected else "[green]normal[/green]",
        )
    return table


def _verdict_table(reports: list[UncertaintyReport]) -> Table:
    table = Table(
        title="[bold blue]Model uncertainty tests[/bold blue]",
        show_header=True,
        header_style="bold magenta",
    )
    table.add_column("Model", style="cyan")
    table.add_column("Scenario")
    table.add_column("α_min")
    table.add_column("Threshold")
    table.add_column("Result")
    for report in reports:
        for result in report.scenarios:
            table.add_row(
                report.model_id,
                result.scenario_id,
                f"{result.alpha_min:.3e}",
                f"{result.threshold:.4g}",
                "[red]reject[/red]" if result.rejected else "[green]accept[/green]",
            )
    return table


@click.group()
@click.version_option(__version__)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    envvar="MODEL_UNCERTAINTY_CONFIG",
    help="JSON run configuration (built-in press demo when omitted)",
)
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="WARNING",
    show_default=True,
)
@click.option("--json-logs", is_flag=True, help="Emit JSON log lines on stderr")
@click.pass_context
def cli(
    ctx: click.Context, config_path: Path | None, log_level: str, json_logs: bool
) -> None:
    """Model uncertainty detection - sensor selection and calibration/validation tests."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    configure_logging(level=log_level, json_logs=json_logs)


@cli.command()
@click.option("--seed", type=int, help="Random seed")
@click.option("--n-m", "n_m", type=int, help="Number of measurement series")
@click.option(
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    default=Path("measurements.csv"),
    show_default=True,
)
@click.pass_context
@handle_errors
def generate(ctx: click.Context, seed: int | None, n_m: int | None, out: Path) -> None:
    """Generate synthetic press measurements."""
    config = _config(ctx, seed=seed, n_m=n_m).model_copy(update={"measurements": None})
    with stage("setup"):
        setup = prepare(config)
    with stage("data"):
        tensor = acquire(config, setup, config.seed)
    path = export_measurements(tensor, out, list(setup.model.sensor_names))
    console.print(
        f"✅ Wrote {tensor.n_m} series × {tensor.n_q} inputs × {tensor.n_s} sensors to {path}"
    )


@cli.command()
@click.option("--measurements", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--criterion",
    type=click.Choice([c.value for c in DesignCriterion]),
    help="Design criterion",
)
@click.pass_context
@handle_errors
def oed(ctx: click.Context, measurements: Path | None, criterion: str | None) -> None:
    """Select the optimal sensor subset."""
    config = _config(ctx, measurements=measurements, criterion=criterion)
    with stage("setup"):
        setup = prepare(config)
    with stage("data"):
        tensor = acquire(config, setup, config.seed)
    with stage("oed", criterion=config.criterion.value):
        designs, selected, greedy = select_design(config, setup, tensor)
    console.print(_design_table(designs, selected))

    summary = Text()
    summary.append(f"Exhaustive: {selected.label}\n", style="bold green")
    summary.append(f"Greedy:     {greedy.label}", style="cyan")
    console.print(Panel(summary, title="[bold blue]ω_opt[/bold blue]", border_style="green"))


@cli.command()
@click.option("--measurements", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--level", type=float, help="Test level of the Shapiro-Wilk screen")
@click.pass_context
@handle_errors
def screen(ctx: click.Context, measurements: Path | None, level: float | None) -> None:
    """Screen measurement errors for normality."""
    config = _config(ctx, measurements=measurements, normality_level=level)
    config = config.model_copy(update={"normality_policy": "warn"})
    with stage("setup"):
        setup = prepare(config)
    with stage("data"):
        tensor = acquire(config, setup, config.seed)
    with stage("screen"):
        result, _ = screen_measurements(config, setup, tensor)
    assert result is not None
    console.print(_normality_table(result, list(setup.model.sensor_names)))


@cli.command()
@click.option("--measurements", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--model",
    "models",
    multiple=True,
    type=click.Choice(CANDIDATE_FRICTION_MODELS),
    help="Candidate friction model (repeatable; all when omitted)",
)
@click.option("--tol", type=float, help="Family-wise test level")
@click.pass_context
@handle_errors
def detect(
    ctx: click.Context,
    measurements: Path | None,
    models: tuple[str, ...],
    tol: float | None,
) -> None:
    """Test candidate models with all sensors active."""
    config = _config(
        ctx,
        measurements=measurements,
        tol=tol,
        friction_models=list(models) or None,
    )
    with stage("setup"):
        setup = prepare(config)
    with stage("data"):
        tensor = acquire(config, setup, config.seed)
    with stage("screen", policy=config.normality_policy):
        normality, tensor = screen_measurements(config, setup, tensor)
    with stage("friction"):
        training = train_friction(config, setup, tensor)
    reports = []
    for name in training.candidates:
        with stage("detect", model=name):
            report, _ = detect_candidate(config, setup, training, name, normality)
        reports.append(report)
    console.print(_verdict_table(reports))


@cli.command()
@click.option("--measurements", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", type=int, help="Random seed")
@click.option("--tol", type=float, help="Family-wise test level")
@click.option(
    "--criterion",
    type=click.Choice([c.value for c in DesignCriterion]),
    help="Design criterion",
)
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path))
@click.pass_context
@handle_errors
def pipeline(
    ctx: click.Context,
    measurements: Path | None,
    seed: int | None,
    tol: float | None,
    criterion: str | None,
    out_dir: Path | None,
) -> None:
    """Run sensor selection, screening and model tests; write the report."""
    config = _config(
        ctx,
        measurements=measurements,
        seed=seed,
        tol=tol,
        criterion=criterion,
        output_dir=out_dir,
    )
    with console.status("[bold green]Running pipeline..."):
        document = run_pipeline(config)
    written = document.write(config.output_dir)

    console.print(_verdict_table(document.reports))
    lines = Text()
    for model_id, verdict in document.verdicts.items():
        style = "red" if verdict else "green"
        lines.append(
            f"{model_id}: {'model uncertainty detected' if verdict else 'no uncertainty detected'}\n",
            style=style,
        )
    lines.append(f"📄 {len(written)} files in {config.output_dir}", style="dim")
    console.print(Panel(lines, title="[bold blue]Verdicts[/bold blue]", border_style="green"))


def main() -> None:
    """Main entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()
