import itertools
import logging
import shutil
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import pandas as pd
import toml
from pydantic import ValidationError
from tqdm import tqdm

from earcp_lab.core.config import settings
from earcp_lab.core.errors import ConfigParseError, IngestionError, PersistenceError
from earcp_lab.models.schemas import (
    AggregatorKind, AggregatorSpec, CellJob, CellResult, EarcpConfig, ExperimentConfig, ExperimentRecord,
    ScenarioSpec
)
from earcp_lab.services.aggregator import EarcpAggregator
from earcp_lab.services.factory import build_aggregator
from earcp_lab.services.ingest import ingest_csv, write_stream_csv
from earcp_lab.services.metrics import run_metrics, summarize, write_csv, write_trace_csv
from earcp_lab.services.simulator import drive_stream, scenario_steps
from earcp_lab.utils.helpers import format_params, generate_config_hash, sanitize_filename

logger = logging.getLogger(__name__)

# Tags of discriminated unions; pydantic inserts them into error locations
_UNION_TAGS = {
    "sq", "zero_one", "xent", "hedge", "uniform", "ftl",
    "accurate", "biased", "random_guess", "collusive_wrong",
}

GridParams = List[Tuple[str, float]]

# =============================================================================
# CONFIGURATION DOCUMENTS
# =============================================================================

def _error_location(loc: Sequence[Any], names: List[str]) -> str:
    """Map a pydantic error location back onto the document's section names"""
    parts = list(loc)
    out: List[str] = []
    if parts and parts[0] == "aggregators":
        out.append("aggregator")
        parts = parts[1:]
        if parts and isinstance(parts[0], int):
            out.append(names[parts[0]] if parts[0] < len(names) else str(parts[0]))
            parts = parts[1:]
        if parts and parts[0] in ("earcp", "baseline"):
            parts = parts[1:]
    elif parts and parts[0] == "ablation_grid":
        out.append("grid")
        parts = parts[1:]
    out.extend(str(part) for part in parts if part not in _UNION_TAGS)
    return ".".join(out) or "<document>"

def _error_message(error: Dict[str, Any]) -> str:
    message = error["msg"]
    if message.startswith("Value error, "):
        message = message[len("Value error, "):]
    return message

def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate an experiment document (TOML).

    Raises ConfigParseError carrying one "location: problem" line per violation.
    """
    try:
        document = toml.loads(text)
    except toml.TomlDecodeError as e:
        raise ConfigParseError([f"line {e.lineno}: {e.msg}"]) from e

    errors: List[str] = []
    sections = document.pop("aggregator", None)
    names: List[str] = []
    aggregators = []
    if sections is not None:
        if not isinstance(sections, dict):
            errors.append("aggregator: must be a table of [aggregator.NAME] sections")
        else:
            for name, section in sections.items():
                names.append(name)
                if not isinstance(section, dict):
                    errors.append(f"aggregator.{name}: must be a table")
                    continue
                section = dict(section)
                kind = section.pop("kind", None)
                if kind is None:
                    errors.append(f"aggregator.{name}.kind: missing (one of earcp, hedge, uniform, ftl)")
                    continue
                entry: Dict[str, Any] = {"name": name, "kind": kind}
                if kind == AggregatorKind.EARCP.value:
                    entry["earcp"] = section
                else:
                    entry["baseline"] = {"kind": kind, **section}
                aggregators.append(entry)
    if errors:
        raise ConfigParseError(errors)

    payload = dict(document)
    if sections is not None:
        payload["aggregators"] = aggregators
    if "grid" in payload:
        payload["ablation_grid"] = payload.pop("grid")
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigParseError(
            [f"{_error_location(error['loc'], names)}: {_error_message(error)}" for error in e.errors()]
        ) from e

def load_config(path: str) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigParseError([f"{path}: cannot read ({e.strerror})"]) from e
    return parse_config(text)

def render_config(config: ExperimentConfig) -> str:
    """Render a config back to TOML such that parse_config(render_config(c)) == c"""
    document: Dict[str, Any] = {
        "seeds": list(config.seeds),
        "output_dir": config.output_dir,
        "write_snapshots": config.write_snapshots,
        "loss": config.loss.model_dump(mode="json"),
    }
    aggregators: Dict[str, Dict[str, Any]] = {}
    for spec in config.aggregators:
        section: Dict[str, Any] = {"kind": spec.kind.value}
        if spec.earcp is not None:
            fields = spec.earcp.model_dump(mode="json")
            if fields["norm_window"] is None:
                fields["norm_window"] = "unbounded"
            section.update({key: value for key, value in fields.items() if value is not None})
        else:
            fields = spec.baseline.model_dump(mode="json", exclude_none=True)
            fields.pop("kind")
            section.update(fields)
        aggregators[spec.name] = section
    document["aggregator"] = aggregators
    if config.scenario is not None:
        document["scenario"] = config.scenario.model_dump(mode="json")
    if config.csv_input is not None:
        document["csv_input"] = config.csv_input.model_dump(mode="json", exclude_none=True)
    if config.ablation_grid:
        document["grid"] = {key: list(values) for key, values in config.ablation_grid.items()}
    return toml.dumps(document)

# =============================================================================
# ABLATION GRIDS
# =============================================================================

def expand_grid(base: EarcpConfig, grid: Dict[str, List[float]]) -> List[Tuple[GridParams, EarcpConfig]]:
    """Cartesian product of grid values over a base config, first key varying slowest"""
    if not grid:
        return [([], base)]
    keys = list(grid)
    cells = []
    for values in itertools.product(*(grid[key] for key in keys)):
        params = list(zip(keys, values))
        cells.append((params, apply_params(base, params)))
    return cells

def apply_params(base: EarcpConfig, params: GridParams) -> EarcpConfig:
    if not params:
        return base
    try:
        return EarcpConfig.model_validate({**base.model_dump(), **dict(params)})
    except ValidationError as e:
        raise ConfigParseError(
            [f"grid.{'.'.join(str(part) for part in error['loc'])}: {_error_message(error)}" for error in e.errors()]
        ) from e

def aggregator_cells(spec: AggregatorSpec, grid: Dict[str, List[float]]) -> List[GridParams]:
    """Grid cells for one aggregator; baselines have no hyperparameters to sweep"""
    if spec.kind != AggregatorKind.EARCP:
        return [[]]
    return [params for params, _ in expand_grid(spec.earcp, grid)]

# =============================================================================
# CELLS
# =============================================================================

def _cell_stem(name: str, cell: int, seed: int) -> str:
    return f"{sanitize_filename(name)}__cell{cell:04d}__seed{seed}"

def experiment_stream(config: ExperimentConfig, seed: int) -> Tuple[Iterator, int, Optional[int], List[int]]:
    """(steps, delay, horizon, change points) for one seed"""
    if config.scenario is not None:
        scenario = config.scenario.model_copy(update={"seed": seed})
        return scenario_steps(scenario), scenario.delay, scenario.horizon, list(scenario.change_points)
    source = config.csv_input
    return ingest_csv(source.path, source.mode, source.m, source.d), source.delay, None, []

def run_cell(job: CellJob) -> CellResult:
    """Run one aggregator session over one stream and write its trace"""
    config = ExperimentConfig.model_validate_json(job.config_json)
    spec = config.aggregators[job.aggregator_index]
    if spec.kind == AggregatorKind.EARCP and job.params:
        spec = spec.model_copy(update={"earcp": apply_params(spec.earcp, job.params)})

    steps, delay, horizon, change_points = experiment_stream(config, job.seed)
    aggregator = build_aggregator(spec, config.expert_count, config.mode, config.loss,
                                  seed=job.seed, horizon=horizon)
    records = drive_stream(aggregator, steps, delay)
    if not records:
        raise IngestionError("input stream has no steps")

    staging = Path(job.staging_dir)
    stem = _cell_stem(spec.name, job.cell, job.seed)
    trace_file = Path("traces") / f"{stem}.csv"
    write_trace_csv(staging / trace_file, records)

    snapshot_file = None
    if config.write_snapshots and isinstance(aggregator, EarcpAggregator):
        snapshot_file = Path("snapshots") / f"{stem}.json"
        (staging / "snapshots").mkdir(parents=True, exist_ok=True)
        (staging / snapshot_file).write_text(aggregator.snapshot_json() + "\n", encoding="utf-8", newline="\n")

    metrics = run_metrics(records, change_points)
    return CellResult(
        aggregator=spec.name,
        kind=spec.kind,
        cell=job.cell,
        params=job.params,
        seed=job.seed,
        steps=len(records),
        regret=metrics.regret,
        cumulative_loss=metrics.cumulative_loss,
        mean_entropy=metrics.mean_entropy,
        min_entropy=metrics.min_entropy,
        segment_regrets=metrics.segment_regrets,
        trace_file=trace_file.as_posix(),
        snapshot_file=None if snapshot_file is None else snapshot_file.as_posix(),
    )

# =============================================================================
# RUNNER
# =============================================================================

class ExperimentService:
    def __init__(self):
        self.task_queue = settings.CELERY_QUEUE

    def plan(self, config: ExperimentConfig, sweep: bool = False) -> List[Tuple[int, int, GridParams, int]]:
        """(aggregator index, cell, params, seed) for every run, in output order"""
        grid = config.ablation_grid if sweep else {}
        jobs = []
        for index, spec in enumerate(config.aggregators):
            for cell, params in enumerate(aggregator_cells(spec, grid)):
                for seed in config.seeds:
                    jobs.append((index, cell, params, seed))
        return jobs

    def run_experiment(self, config: ExperimentConfig, sweep: bool = False, quiet: bool = False) -> Path:
        """Run every (aggregator x cell x seed) and write traces plus summaries.

        Outputs are staged next to output_dir and moved into place only when every
        cell succeeded; a failed run leaves no partial files behind.
        """
        from earcp_lab.tasks.experiment_tasks import run_cell_task

        if config.ablation_grid and not sweep:
            logger.warning("Config has a [grid] section; 'run' uses the base hyperparameters (use 'sweep')")
        output_dir = Path(config.output_dir)
        rendered = render_config(config)
        staging = output_dir.with_name(f".{output_dir.name}.{generate_config_hash(rendered)}.partial")
        try:
            if staging.exists():
                shutil.rmtree(staging)
            (staging / "traces").mkdir(parents=True)
        except OSError as e:
            logger.error(f"Cannot create output directory next to {output_dir}: {e}")
            raise PersistenceError(f"output directory {output_dir} is not writable: {e.strerror}") from e

        jobs = self.plan(config, sweep)
        config_json = config.model_dump_json()
        logger.info(f"Starting experiment: {len(jobs)} runs, output {output_dir}")
        try:
            results = []
            for index, cell, params, seed in tqdm(jobs, desc="runs", unit="run", disable=quiet):
                job = CellJob(config_json=config_json, aggregator_index=index, cell=cell,
                              params=params, seed=seed, staging_dir=str(staging))
                payload = run_cell_task.apply_async(args=[job.model_dump()], queue=self.task_queue).get()
                results.append(CellResult.model_validate(payload))

            (staging / "config.toml").write_text(rendered, encoding="utf-8", newline="\n")
            write_csv(self.summary_frame(results), staging / "summary.csv")
            if len(config.seeds) >= 2:
                write_csv(self.summary_stats_frame(results), staging / "summary_stats.csv")
            self._publish(staging, output_dir)
        except Exception as e:
            logger.error(f"Experiment failed, discarding partial outputs: {e}")
            shutil.rmtree(staging, ignore_errors=True)
            raise

        logger.info(f"Experiment finished: {len(results)} traces written to {output_dir}")
        return output_dir

    def summary_frame(self, results: Sequence[CellResult]) -> pd.DataFrame:
        rows = []
        for result in results:
            row = {
                "aggregator": result.aggregator,
                "kind": result.kind.value,
                "cell": result.cell,
                "params": format_params(result.params),
                "seed": result.seed,
                "steps": result.steps,
                "regret": result.regret,
                "cumulative_loss": result.cumulative_loss,
                "mean_entropy": result.mean_entropy,
                "min_entropy": result.min_entropy,
            }
            for index, value in enumerate(result.segment_regrets):
                row[f"segment_regret_{index}"] = value
            row["trace_file"] = result.trace_file
            rows.append(row)
        return pd.DataFrame(rows)

    def summary_stats_frame(self, results: Sequence[CellResult]) -> pd.DataFrame:
        """Across-seed statistics per (aggregator, cell)"""
        groups: Dict[Tuple[str, int], List[CellResult]] = {}
        for result in results:
            groups.setdefault((result.aggregator, result.cell), []).append(result)
        rows = []
        for (name, cell), members in groups.items():
            for stat in summarize([member.run_metrics() for member in members]):
                rows.append({
                    "aggregator": name,
                    "cell": cell,
                    "params": format_params(members[0].params),
                    "metric": stat.metric,
                    "n": stat.n,
                    "mean": stat.mean,
                    "std": stat.std,
                    "ci_low": stat.ci_low,
                    "ci_high": stat.ci_high,
                })
        return pd.DataFrame(rows)

    def simulate(self, config: ExperimentConfig, quiet: bool = False) -> List[Path]:
        """Export the scenario stream for every seed without running aggregators"""
        if config.scenario is None:
            raise ConfigParseError(["scenario: 'simulate' needs a [scenario] section"])
        output_dir = Path(config.output_dir) / "streams"
        written = []
        for seed in tqdm(config.seeds, desc="streams", unit="stream", disable=quiet):
            scenario: ScenarioSpec = config.scenario.model_copy(update={"seed": seed})
            written.append(write_stream_csv(output_dir / f"stream__seed{seed}.csv", scenario_steps(scenario)))
        return written

    def replay(self, snapshot_path: str, csv_path: str, output_dir: str, quiet: bool = False) -> Path:
        """Resume a saved EARCP session on an ingested stream.

        Rows for steps the snapshot already consumed are skipped, rows that complete
        pending feedback are applied as updates, and later steps are predicted and updated.
        """
        try:
            text = Path(snapshot_path).read_bytes()
        except OSError as e:
            raise PersistenceError(f"cannot read snapshot {snapshot_path}: {e.strerror}") from e
        aggregator = EarcpAggregator.restore(text)
        pending_steps = {entry.step for entry in aggregator.pending.entries()}

        records: List[ExperimentRecord] = []
        skipped = 0
        stream = ingest_csv(csv_path, aggregator.mode, aggregator.m, aggregator.d)
        for step, predictions, target in tqdm(stream, desc="replay", unit="step", disable=quiet):
            if step in pending_steps:
                records.append(ExperimentRecord.from_outcome(aggregator.update(step, target)))
                pending_steps.discard(step)
            elif step < aggregator.next_step:
                skipped += 1
            else:
                aggregator.predict(predictions)
                records.append(ExperimentRecord.from_outcome(aggregator.update(aggregator.issued_step, target)))
        if skipped:
            logger.warning(f"Skipped {skipped} rows already consumed by the snapshot")
        if not records:
            raise IngestionError(f"{csv_path} has no steps beyond the snapshot")

        out = Path(output_dir)
        write_trace_csv(out / "replay_trace.csv", records)
        (out / "snapshot.json").write_text(aggregator.snapshot_json() + "\n", encoding="utf-8", newline="\n")
        logger.info(f"Replayed {len(records)} steps from {csv_path}; session now at t={aggregator.state.t}")
        return out

    def _publish(self, staging: Path, output_dir: Path) -> None:
        output_dir.mkdir(parents=True, exist_ok=True)
        for source in sorted(staging.rglob("*")):
            if source.is_file():
                destination = output_dir / source.relative_to(staging)
                destination.parent.mkdir(parents=True, exist_ok=True)
                source.replace(destination)
        shutil.rmtree(staging)

experiment_service = ExperimentService()
