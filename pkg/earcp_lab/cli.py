import functools
import logging
from pathlib import Path
from typing import Optional

import click
from pydantic import ValidationError

from earcp_lab.core.config import configure_logging, settings
from earcp_lab.core.errors import ConfigParseError, EarcpError
from earcp_lab.models.schemas import ExperimentConfig
from earcp_lab.services.experiment_service import experiment_service, load_config
from earcp_lab.utils.helpers import format_params

logger = logging.getLogger(__name__)

seed_option = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None,
                           help="Run this single seed instead of the config's seed list.")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None,
                          help="Output directory (overrides output_dir).")
quiet_option = click.option("--quiet", is_flag=True, help="Only log warnings and errors; no progress bars.")

def _guarded(command):
    """Turn library errors into a non-zero exit with the messages on stderr"""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        configure_logging("WARNING" if kwargs.get("quiet") else None)
        try:
            return command(*args, **kwargs)
        except ConfigParseError as e:
            for line in e.errors:
                click.echo(f"error: {line}", err=True)
        except (EarcpError, ValidationError) as e:
            click.echo(f"error: {e}", err=True)
        raise SystemExit(1)
    return wrapper

def _load(config_path: str, seed: Optional[int], out: Optional[str]) -> ExperimentConfig:
    config = load_config(config_path)
    update = {}
    if seed is not None:
        update["seeds"] = [seed]
    if out is not None:
        update["output_dir"] = out
    return config.model_copy(update=update) if update else config

@click.group()
def cli():
    """EARCP ensemble-weighting experiments"""

@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@seed_option
@out_option
@quiet_option
@_guarded
def run(config, seed, out, quiet):
    """Run every aggregator on the configured stream for each seed."""
    output_dir = experiment_service.run_experiment(_load(config, seed, out), sweep=False, quiet=quiet)
    click.echo(f"results written to {output_dir}")

@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@seed_option
@out_option
@quiet_option
@click.option("--dry-run", is_flag=True, help="List the grid cells without running them.")
@_guarded
def sweep(config, seed, out, quiet, dry_run):
    """Expand the [grid] section and run every cell for each seed."""
    experiment = _load(config, seed, out)
    if dry_run:
        jobs = experiment_service.plan(experiment, sweep=True)
        for index, cell, params, job_seed in jobs:
            click.echo(f"{experiment.aggregators[index].name}\t{cell}\t{job_seed}\t{format_params(params)}")
        click.echo(f"{len(jobs)} runs", err=True)
        return
    output_dir = experiment_service.run_experiment(experiment, sweep=True, quiet=quiet)
    click.echo(f"results written to {output_dir}")

@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@seed_option
@out_option
@quiet_option
@_guarded
def simulate(config, seed, out, quiet):
    """Write the scenario's expert streams in the ingestion CSV format."""
    for path in experiment_service.simulate(_load(config, seed, out), quiet=quiet):
        click.echo(str(path))

@cli.command()
@click.argument("snapshot", type=click.Path(exists=True, dir_okay=False))
@click.argument("csv", type=click.Path(exists=True, dir_okay=False))
@out_option
@quiet_option
@_guarded
def replay(snapshot, csv, out, quiet):
    """Resume a saved EARCP session on an expert-stream CSV."""
    output_dir = out if out is not None else str(Path(settings.OUTPUT_DIR) / "replay")
    result = experiment_service.replay(snapshot, csv, output_dir, quiet=quiet)
    click.echo(f"results written to {result}")
