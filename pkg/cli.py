"""CLI for streaming conformal calibration experiments (OCP, FOCP, AOCP, AFOCP)."""

import asyncio
import sys

import click
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

# Tables and panels go to stderr; stdout carries only output paths.
console = Console(stderr=True)

EXIT_OK = 0
EXIT_FAILED_CELLS = 1
EXIT_INVALID = 2


@click.group()
def cli():
    """Conformal calibration runner: train a two-stage model, stream a test split, write coverage/length results."""
    pass


def _print_validation_error(e: ValidationError) -> None:
    table = Table(title="Invalid configuration", title_style="bold red")
    table.add_column("Field", style="cyan")
    table.add_column("Problem")
    for err in e.errors():
        table.add_row(".".join(str(p) for p in err["loc"]) or "-", err["msg"])
    console.print(table)


def _load_config(flags: dict, config_path):
    from src.config import Settings, load_yaml_config, resolve_experiment_config

    settings = Settings()
    yaml_config = load_yaml_config()
    flags.setdefault("out", None)
    if flags["out"] is None:
        flags["out"] = settings.output_dir
    if flags.get("workers") is None and settings.workers != 1:
        flags["workers"] = settings.workers
    try:
        cfg = resolve_experiment_config(yaml_config, flags, config_path)
    except ValidationError as e:
        _print_validation_error(e)
        sys.exit(EXIT_INVALID)
    except ValueError as e:
        console.print(f"[bold red]Invalid configuration:[/] {e}")
        sys.exit(EXIT_INVALID)
    return settings, cfg


def _experiment_options(fn):
    options = [
        click.option("--dataset", default=None, help="'synthetic', a preset id, or a path to a preset JSON"),
        click.option("--methods", default=None, help="Comma-separated subset of OCP,FOCP,AOCP,AFOCP"),
        click.option("--alpha", type=float, default=None, help="Target miscoverage rate (default 0.1)"),
        click.option("--window", type=int, default=None, help="Calibration window length L (default 100)"),
        click.option("--feature-dim", type=int, default=None, help="Feature dimension D (default 50)"),
        click.option("--lambda", "lambda_", type=float, default=None, help="Alpha step size (default 0.005)"),
        click.option("--inversion-steps", type=int, default=None, help="Head inversion steps N (default 100)"),
        click.option("--inversion-lr", type=float, default=None, help="Head inversion step size (default: automatic)"),
        click.option("--seeds", default=None, help="Comma-separated seeds (default 0,1,2,3,4)"),
        click.option("--out", default=None, help="Output directory"),
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="Experiment YAML; its values override flags"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _flags(dataset, methods, alpha, window, feature_dim, lambda_, inversion_steps, inversion_lr, seeds, out) -> dict:
    return {
        "dataset": dataset,
        "methods": methods,
        "alpha": alpha,
        "window": window,
        "feature_dim": feature_dim,
        "lambda": lambda_,
        "inversion_steps": inversion_steps,
        "inversion_lr": inversion_lr,
        "seeds": seeds,
        "out": out,
    }


@cli.command()
@_experiment_options
@click.option("--sweep", default=None, help="Sweep one variable, e.g. window=20,40,60 (window, feature_dim, alpha, lambda)")
@click.option("--workers", type=int, default=None, help="Worker processes for (method, seed) cells")
def run(dataset, methods, alpha, window, feature_dim, lambda_, inversion_steps, inversion_lr, seeds, out,
        config_path, sweep, workers):
    """Run calibrators over seeds (and an optional sweep) and write events/summary files.

    Examples:

      python cli.py run --methods OCP,AFOCP --seeds 0

      python cli.py run --dataset air_quality --sweep window=20,40,60,80,100,120,140

      python cli.py run --config experiments/fig2.yaml --workers 4
    """
    from src.orchestrator import run_experiment
    from src.presets import load_preset
    from src.utils import setup_logging

    flags = _flags(dataset, methods, alpha, window, feature_dim, lambda_, inversion_steps, inversion_lr, seeds, out)
    flags.update({"sweep": sweep, "workers": workers})
    settings, cfg = _load_config(flags, config_path)
    setup_logging(settings.log_level)

    if cfg.dataset != "synthetic":
        try:
            load_preset(cfg.dataset, settings.presets_path)
        except (FileNotFoundError, ValueError) as e:
            console.print(f"[bold red]Dataset preset problem:[/] {e}")
            console.print("Use [cyan]python cli.py list-presets[/] to see available presets.")
            sys.exit(EXIT_INVALID)

    console.print(Panel(
        f"Dataset: [bold]{cfg.dataset}[/] | Methods: {', '.join(m.value for m in cfg.methods)}\n"
        f"alpha={cfg.alpha} L={cfg.window} D={cfg.feature_dim} lambda={cfg.lambda_} | Seeds: {cfg.seeds}\n"
        f"Sweep: {', '.join(cfg.sweep.labels()) if cfg.sweep else 'none'} | Workers: {cfg.workers}\n"
        f"Output: {cfg.out}",
        title="Calibration Run",
        border_style="blue",
    ))

    summaries = asyncio.run(run_experiment(cfg, settings.presets_path))
    _print_summaries(summaries)
    for s in summaries:
        if s.events_path:
            click.echo(s.events_path)

    failed = [s for s in summaries if s.status.value != "completed"]
    sys.exit(EXIT_FAILED_CELLS if failed else EXIT_OK)


@cli.command()
@_experiment_options
@click.option("--holder-r", type=float, default=1.0, help="Hölder constant R used in the expansion statistic")
@click.option("--holder-beta", type=float, default=1.0, help="Hölder exponent beta used in the expansion statistic")
def diagnose(dataset, methods, alpha, window, feature_dim, lambda_, inversion_steps, inversion_lr, seeds, out,
             config_path, holder_r, holder_beta):
    """Paired AOCP/AFOCP run reporting the length-preservation, expansion and quantile-stability statistics.

    Runs once per seed; --methods is ignored.

    Examples:

      python cli.py diagnose --seeds 0 --window 50
    """
    from src.orchestrator import run_diagnostics
    from src.utils import setup_logging

    flags = _flags(dataset, None, alpha, window, feature_dim, lambda_, inversion_steps, inversion_lr, seeds, out)
    settings, cfg = _load_config(flags, config_path)
    setup_logging(settings.log_level)

    table = Table(title="Assumption Diagnostics")
    table.add_column("Seed", style="cyan")
    table.add_column("Steps", justify="right")
    table.add_column("Length pres. (lhs / rhs)", justify="right")
    table.add_column("Expansion (lhs / rhs)", justify="right")
    table.add_column("Quantile stab.", justify="right")

    exit_code = EXIT_OK
    for seed in cfg.seeds:
        try:
            report, path = run_diagnostics(cfg, seed, settings.presets_path, holder_r, holder_beta)
        except Exception as e:
            console.print(f"[red]Seed {seed} failed: {type(e).__name__}: {e}[/]")
            exit_code = EXIT_FAILED_CELLS
            continue
        table.add_row(
            str(seed),
            f"{report.steps_used} (+{report.steps_skipped} skipped)",
            f"{report.length_preservation_lhs:.4g} / {report.length_preservation_rhs:.4g}",
            f"{report.expansion_lhs:.4g} / {report.expansion_rhs:.4g}",
            f"{report.quantile_stability_lhs:.4g}",
        )
        click.echo(path)

    console.print(table)
    sys.exit(exit_code)


@cli.command()
@click.argument("results_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--output", "output_path", default=None, help="CSV path (default: <RESULTS_DIR>/plotdata.csv)")
def plotdata(results_dir: str, output_path: str | None):
    """Collect every summary.json under RESULTS_DIR into one long-format CSV.

    Examples:

      python cli.py plotdata output/
    """
    from src.config import Settings
    from src.report_writer import NoSummariesError, emit_plotdata
    from src.utils import setup_logging

    setup_logging(Settings().log_level)
    try:
        path = emit_plotdata(results_dir, output_path)
    except NoSummariesError as e:
        console.print(f"[bold red]{e}[/]")
        sys.exit(EXIT_INVALID)
    click.echo(path)


@cli.command("list-presets")
def list_presets():
    """List all available dataset presets."""
    from src.config import Settings
    from src.presets import load_all_presets

    presets = load_all_presets(Settings().presets_path)

    table = Table(title="Available Dataset Presets")
    table.add_column("ID", style="cyan")
    table.add_column("Name", style="green")
    table.add_column("Inputs", justify="right")
    table.add_column("Targets")
    table.add_column("CSV")

    for p in presets:
        targets = f"{p.alternate.column_a} | {p.alternate.column_b}" if p.alternate else ", ".join(p.target_columns)
        table.add_row(p.id, p.name, str(len(p.input_columns)), targets, p.csv_path)

    console.print(table)


@cli.command("show-config")
@_experiment_options
def show_config(dataset, methods, alpha, window, feature_dim, lambda_, inversion_steps, inversion_lr, seeds, out,
                config_path):
    """Print the fully resolved experiment configuration as YAML."""
    import yaml

    flags = _flags(dataset, methods, alpha, window, feature_dim, lambda_, inversion_steps, inversion_lr, seeds, out)
    _, cfg = _load_config(flags, config_path)
    click.echo(yaml.safe_dump(cfg.snapshot(), sort_keys=False))


def _print_summaries(summaries):
    """Pretty-print per-cell results in a comparison table."""
    from src.models import RunStatus

    table = Table(title="Run Results")
    table.add_column("Point", style="cyan")
    table.add_column("Method")
    table.add_column("Seed", justify="right")
    table.add_column("Status")
    table.add_column("Coverage", justify="right")
    table.add_column("Mean length", justify="right")
    table.add_column("Bound lhs <= rhs", justify="right")

    for s in summaries:
        color = "green" if s.status == RunStatus.COMPLETED else "red"
        point = f"{s.sweep_var}={s.sweep_value:g}" if s.sweep_var else "base"
        coverage = f"{s.coverage:.4f}" if s.coverage is not None else "N/A"
        length = f"{s.mean_length:.4g}" if s.mean_length is not None else "N/A"
        bound = (
            f"{s.theorem1_bound_lhs:.4f} <= {s.theorem1_bound_rhs:.4f}"
            if s.theorem1_bound_lhs is not None else "N/A"
        )
        table.add_row(point, s.method, str(s.seed), f"[{color}]{s.status.value}[/]", coverage, length, bound)

    console.print(table)

    failed = [s for s in summaries if s.status != RunStatus.COMPLETED]
    for s in failed:
        console.print(f"[red]{s.method} seed {s.seed}: {s.error_message}[/]")


if __name__ == "__main__":
    cli()
