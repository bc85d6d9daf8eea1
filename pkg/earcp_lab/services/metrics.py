import logging
import math
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd

from earcp_lab.core.config import settings
from earcp_lab.core.errors import ContractError
from earcp_lab.models.schemas import ExperimentRecord, RunMetrics, SummaryStat

logger = logging.getLogger(__name__)

SUMMARY_METRICS = ("regret", "cumulative_loss", "mean_entropy", "min_entropy")

# =============================================================================
# REGRET
# =============================================================================

def _loss_arrays(records: Sequence[ExperimentRecord]):
    ensemble = np.array([record.ensemble_loss for record in records], dtype=np.float64)
    experts = np.array([record.per_expert_loss for record in records], dtype=np.float64)
    return ensemble, experts

def regret(records: Sequence[ExperimentRecord]) -> float:
    """Cumulative ensemble loss minus the best expert's cumulative loss"""
    if not records:
        raise ContractError("regret of an empty trace is undefined")
    ensemble, experts = _loss_arrays(records)
    return math.fsum(ensemble) - min(math.fsum(column) for column in experts.T)

def segment_regret(records: Sequence[ExperimentRecord], change_points: Sequence[int]) -> List[float]:
    """Regret within each segment against that segment's own best expert.

    Segment boundaries are the change points: a segment starts at its change point and
    runs up to the step before the next one. An empty segment has regret 0.
    """
    if not records:
        raise ContractError("segment regret of an empty trace is undefined")
    steps = np.array([record.step for record in records])
    horizon = int(steps[-1])
    previous = 0
    for point in change_points:
        if not previous < point <= horizon:
            raise ContractError(
                f"change points must be strictly increasing within [1, {horizon}], got {list(change_points)}"
            )
        previous = point

    bounds = [int(steps[0])] + list(change_points) + [horizon + 1]
    regrets = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        segment = [record for record, step in zip(records, steps) if start <= step < stop]
        regrets.append(regret(segment) if segment else 0.0)
    return regrets

def run_metrics(records: Sequence[ExperimentRecord], change_points: Sequence[int] = ()) -> RunMetrics:
    """Per-run summary figures"""
    entropies = np.array([record.entropy for record in records], dtype=np.float64)
    return RunMetrics(
        regret=regret(records),
        cumulative_loss=math.fsum(record.ensemble_loss for record in records),
        mean_entropy=math.fsum(entropies) / entropies.size,
        min_entropy=float(entropies.min()),
        segment_regrets=segment_regret(records, change_points),
    )

# =============================================================================
# SUMMARIES
# =============================================================================

def summarize_values(metric: str, values: Sequence[float], resamples: int = settings.BOOTSTRAP_RESAMPLES,
                     seed: int = settings.BOOTSTRAP_SEED) -> SummaryStat:
    """Mean, sample standard deviation and a percentile-bootstrap 95% CI of the mean"""
    data = np.sort(np.asarray(values, dtype=np.float64))
    n = data.size
    if n < 2:
        raise ContractError(f"summarizing '{metric}' needs at least 2 runs, got {n}")
    if not np.all(np.isfinite(data)):
        raise ContractError(f"'{metric}' has non-finite values")
    low, high = float(data[0]), float(data[-1])
    mean = min(max(math.fsum(data) / n, low), high)
    std = math.sqrt(math.fsum((data - mean) ** 2) / (n - 1))

    rng = np.random.Generator(np.random.PCG64(seed))
    indices = rng.integers(0, n, size=(resamples, n))
    boot_means = data[indices].mean(axis=1)
    ci_low, ci_high = np.percentile(boot_means, [2.5, 97.5])
    # a resampled mean never leaves the sample range
    return SummaryStat(
        metric=metric,
        n=n,
        mean=mean,
        std=std,
        ci_low=min(max(float(ci_low), low), high),
        ci_high=min(max(float(ci_high), low), high),
    )

def summarize(runs: Sequence[RunMetrics], resamples: int = settings.BOOTSTRAP_RESAMPLES,
              seed: int = settings.BOOTSTRAP_SEED) -> List[SummaryStat]:
    """One SummaryStat per metric over a set of runs (order of runs is irrelevant)"""
    if len(runs) < 2:
        raise ContractError(f"summarize needs at least 2 runs, got {len(runs)}")
    columns: Dict[str, List[float]] = {name: [getattr(run, name) for run in runs] for name in SUMMARY_METRICS}
    segment_counts = {len(run.segment_regrets) for run in runs}
    if len(segment_counts) == 1:
        for index in range(segment_counts.pop()):
            columns[f"segment_regret_{index}"] = [run.segment_regrets[index] for run in runs]
    return [summarize_values(name, values, resamples, seed) for name, values in columns.items()]

# =============================================================================
# CSV OUTPUT
# =============================================================================

def trace_frame(records: Sequence[ExperimentRecord]) -> pd.DataFrame:
    """Trace table: step, ensemble_loss, entropy, w_*, l_*, s_*"""
    if not records:
        raise ContractError("cannot tabulate an empty trace")
    m = len(records[0].weights)
    frame = pd.DataFrame({
        "step": [record.step for record in records],
        "ensemble_loss": [record.ensemble_loss for record in records],
        "entropy": [record.entropy for record in records],
    })
    blocks = []
    for prefix, attribute in (("w", "weights"), ("l", "per_expert_loss"), ("s", "scores")):
        values = np.array([getattr(record, attribute) for record in records], dtype=np.float64)
        blocks.append(pd.DataFrame(values, columns=[f"{prefix}_{i}" for i in range(m)]))
    return pd.concat([frame] + blocks, axis=1)

def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=settings.FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    return path

def write_trace_csv(path: Union[str, Path], records: Sequence[ExperimentRecord]) -> Path:
    return write_csv(trace_frame(records), path)
