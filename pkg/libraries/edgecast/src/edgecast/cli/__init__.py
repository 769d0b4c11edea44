import functools
import json
import logging
from pathlib import Path
from typing import Any, Optional

import click
from pydantic import ValidationError

from edgecast.config import DataSource, load_config
from edgecast.data import write_dataset
from edgecast.exceptions import ConfigError
from edgecast.pipeline import (
    build_splits,
    load_prepared,
    load_series,
    prepare,
    simulate,
    write_prepared,
    write_run,
)
from edgecast.simulation.metrics import compute_metrics
from edgecast.simulation.sweep import SWEEP_FILE, run_sweep
from edgecast.simulation.trace import SlotTrace

from .options import (
    GenericCallable,
    axis_option,
    config_option,
    out_option,
    seeds_option,
    set_option,
    threads_option,
    values_option,
)

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.json"


class ConfigurationError(click.ClickException):
    """Invalid configuration or input schema; exits with code 2."""

    exit_code = 2


def exit_codes(f: GenericCallable) -> GenericCallable:
    """Maps configuration failures to exit code 2 and every other failure to 1."""

    @functools.wraps(f)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return f(*args, **kwargs)
        except click.ClickException:
            raise
        except (ConfigError, ValidationError) as e:
            raise ConfigurationError(str(e))
        except Exception as e:
            log.debug("command failed", exc_info=True)
            raise click.ClickException(f"{type(e).__name__}: {e}")

    return wrapper


@click.group()
def cli() -> None:
    pass


@out_option
@set_option
@config_option
@cli.command("generate", help="Write the synthetic scenario as dataset files.")
@exit_codes
def generate(
    config: Optional[str], overrides: tuple[str, ...], out: Optional[str]
) -> None:
    run = load_config(config, overrides, out)
    if run.data.source != DataSource.synthetic:
        raise ConfigError("generate needs data.source = synthetic")
    series = load_series(run)
    written = write_dataset(series, run.output_dir)
    splits = build_splits(run)
    for s, path in zip(series, written):
        click.echo(f"{s.node_id}: {len(s)} rows -> {path}")
    click.echo(
        f"samples train/validation/test: {len(splits.train)}/"
        f"{len(splits.validation)}/{len(splits.test)}"
    )


@out_option
@set_option
@config_option
@cli.command("prepare", help="Train the branches and fit the calibration bundle.")
@exit_codes
def prepare_cmd(
    config: Optional[str], overrides: tuple[str, ...], out: Optional[str]
) -> None:
    run = load_config(config, overrides, out)
    prepared = prepare(run)
    models_path, bundle_path = write_prepared(run, prepared)
    click.echo(f"models: {models_path}")
    click.echo(f"bundle: {bundle_path}")
    auroc = prepared.bundle.replay_auroc
    click.echo(f"replay AUROC: {'undefined' if auroc is None else f'{auroc:.4f}'}")


@out_option
@set_option
@config_option
@cli.command("simulate", help="Run one policy over the test split.")
@exit_codes
def simulate_cmd(
    config: Optional[str], overrides: tuple[str, ...], out: Optional[str]
) -> None:
    run = load_config(config, overrides, out)
    result, summary = simulate(run, load_prepared(run))
    trace_path, slots_path, summary_path = write_run(
        Path(run.output_dir), result, summary
    )
    click.echo(json.dumps(summary.metrics.scalars(), indent=2))
    click.echo(f"trace: {trace_path}")
    click.echo(f"slots: {slots_path}")
    click.echo(f"summary: {summary_path}")


@threads_option
@seeds_option
@values_option
@axis_option
@out_option
@set_option
@config_option
@cli.command("sweep", help="Run one simulation per (value, seed) of a parameter axis.")
@exit_codes
def sweep(
    config: Optional[str],
    overrides: tuple[str, ...],
    out: Optional[str],
    axis: str,
    values: list[float],
    seeds: Optional[list[int]],
    threads: Optional[int],
) -> None:
    run = load_config(config, overrides, out)
    table = run_sweep(axis, values, run, seeds or [run.seed], threads or run.threads)
    path = Path(run.output_dir) / SWEEP_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    click.echo(f"{len(table)} runs -> {path}")


@click.argument("trace_dir", type=click.Path(file_okay=False))
@cli.command("metrics", help="Recompute the metric report from a written trace.")
@exit_codes
def metrics(trace_dir: str) -> None:
    directory = Path(trace_dir)
    if not directory.is_dir():
        raise ConfigError(f"trace directory not found: {directory}")
    report = compute_metrics(SlotTrace.read(directory))
    path = directory / METRICS_FILE
    path.write_text(json.dumps(report.model_dump(mode="json"), sort_keys=True, indent=2))
    click.echo(json.dumps(report.scalars(), indent=2))
    click.echo(f"metrics: {path}")
