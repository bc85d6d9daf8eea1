# Domain models for the EARCP experiment lab

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Annotated, Any, Deque, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from earcp_lab.core.config import settings
from earcp_lab.core.errors import ConfigurationError

# A single expert output, ensemble output or target: 1-D float64 array of length d
PredictionVector = np.ndarray

SCHEMA_VERSION = 1

# =============================================================================
# ENUMS
# =============================================================================

class TaskMode(str, Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"

class AggregatorKind(str, Enum):
    EARCP = "earcp"
    HEDGE = "hedge"
    UNIFORM = "uniform"
    FTL = "ftl"

# =============================================================================
# LOSS MODELS
# =============================================================================

def regression_loss_bound(d: int) -> float:
    """Diameter of the [-1, 1]^d target box, so squared errors inside it never saturate"""
    return 2.0 * math.sqrt(d)

class ScaledSquaredError(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["sq"] = "sq"
    bound: float = Field(1.0, gt=0)

class ZeroOneArgmax(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["zero_one"] = "zero_one"

class ClippedCrossEntropy(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["xent"] = "xent"
    clip: float = Field(0.01, gt=0, lt=1)

LossKind = Annotated[
    Union[ScaledSquaredError, ZeroOneArgmax, ClippedCrossEntropy],
    Field(discriminator="kind")
]

# =============================================================================
# AGGREGATOR CONFIGURATION
# =============================================================================

# field -> (low, high, low_inclusive, high_inclusive)
_RANGES: Dict[str, Tuple[float, float, bool, bool]] = {
    "alpha_p": (0.0, 1.0, False, False),
    "alpha_c": (0.0, 1.0, False, False),
    "beta": (0.0, 1.0, True, True),
    "eta_s": (0.0, math.inf, False, False),
    "w_min": (0.0, 1.0, True, False),
    "s_max": (0.0, math.inf, False, False),
    "gamma": (0.0, math.inf, False, False),
    "epsilon": (0.0, math.inf, False, False),
    "hedge_eta": (0.0, math.inf, False, False),
}

def _describe_range(low: float, high: float, low_inc: bool, high_inc: bool) -> str:
    if math.isinf(high):
        return f"must be {'>=' if low_inc else '>'} {low:g}"
    return f"must lie in {'[' if low_inc else '('}{low:g}, {high:g}{']' if high_inc else ')'}"

class EarcpConfig(BaseModel):
    """Hyperparameters of one EARCP session; immutable once built"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha_p: float = 0.9
    alpha_c: float = 0.85
    beta: float = 0.7
    eta_s: float = 5.0
    w_min: float = 0.05
    s_max: float = 10.0
    gamma: float = 1.0
    epsilon: float = 1e-8
    norm_window: Optional[int] = 50
    coherence_sample_k: Optional[int] = None
    hedge_compat: bool = False
    hedge_eta: float = 0.1

    @field_validator(*_RANGES)
    @classmethod
    def _check_range(cls, value: float, info: ValidationInfo) -> float:
        low, high, low_inc, high_inc = _RANGES[info.field_name]
        ok_low = value >= low if low_inc else value > low
        ok_high = value <= high if high_inc else value < high
        if not (math.isfinite(value) and ok_low and ok_high):
            raise ValueError(f"{_describe_range(low, high, low_inc, high_inc)} (got {value!r})")
        return value

    @field_validator("norm_window", mode="before")
    @classmethod
    def _parse_window(cls, value):
        if isinstance(value, str) and value.strip().lower() == "unbounded":
            return None
        return value

    @field_validator("norm_window", "coherence_sample_k")
    @classmethod
    def _check_positive(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and value < 1:
            raise ValueError(f"must be a positive integer (got {value!r})")
        return value

    def check_expert_count(self, m: int) -> None:
        """Validate the constraints that depend on the expert count M"""
        if m < 2:
            raise ConfigurationError(f"EARCP needs at least 2 experts, got {m}")
        if self.w_min * m >= 1.0:
            raise ConfigurationError(f"w_min * M must be < 1 (w_min={self.w_min}, M={m})")
        if self.coherence_sample_k is not None and not 1 <= self.coherence_sample_k <= m - 1:
            raise ConfigurationError(
                f"coherence_sample_k must lie in [1, {m - 1}] (got {self.coherence_sample_k})"
            )

# Parameters an ablation grid may sweep
GRID_PARAMETERS = tuple(_RANGES) + ("norm_window", "coherence_sample_k")

class Hedge(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["hedge"] = "hedge"
    eta: Optional[float] = Field(None, gt=0)

class Uniform(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["uniform"] = "uniform"

class FollowTheLeader(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["ftl"] = "ftl"

BaselineKind = Annotated[Union[Hedge, Uniform, FollowTheLeader], Field(discriminator="kind")]

class AggregatorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(min_length=1)
    kind: AggregatorKind
    earcp: Optional[EarcpConfig] = None
    baseline: Optional[BaselineKind] = None

    @model_validator(mode="before")
    @classmethod
    def _fill_payload(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        kind = data.get("kind")
        kind = kind.value if isinstance(kind, AggregatorKind) else kind
        if kind == AggregatorKind.EARCP.value:
            data.setdefault("earcp", {})
        elif kind in ("hedge", "uniform", "ftl"):
            data.setdefault("baseline", {"kind": kind})
        return data

    @model_validator(mode="after")
    def _check_payload(self) -> "AggregatorSpec":
        if self.kind == AggregatorKind.EARCP:
            if self.baseline is not None:
                raise ValueError("earcp aggregators take EARCP hyperparameters only")
        else:
            if self.earcp is not None:
                raise ValueError(f"{self.kind.value} aggregators take no EARCP hyperparameters")
            if self.baseline.kind != self.kind.value:
                raise ValueError(f"baseline kind {self.baseline.kind} does not match {self.kind.value}")
        return self

# =============================================================================
# SCENARIO MODELS
# =============================================================================

class Accurate(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    behavior: Literal["accurate"] = "accurate"
    noise: float = Field(0.0, ge=0)

class Biased(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    behavior: Literal["biased"] = "biased"
    offset: List[float]

class RandomGuess(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    behavior: Literal["random_guess"] = "random_guess"

class CollusiveWrong(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    behavior: Literal["collusive_wrong"] = "collusive_wrong"
    group_id: int = Field(0, ge=0)
    agree_prob: float = Field(1.0, ge=0, le=1)

ExpertBehavior = Annotated[
    Union[Accurate, Biased, RandomGuess, CollusiveWrong],
    Field(discriminator="behavior")
]

class ScenarioSpec(BaseModel):
    """Synthetic expert-stream description"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: TaskMode
    m: int = Field(ge=2)
    d: int = Field(ge=1)
    horizon: int = Field(ge=1)
    experts: List[ExpertBehavior]
    change_points: List[int] = []
    delay: int = Field(0, ge=0)
    seed: int = Field(0, ge=0, lt=2 ** 64)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ScenarioSpec":
        if len(self.experts) != self.m:
            raise ValueError(f"experts lists {len(self.experts)} behaviors but m = {self.m}")
        if self.mode == TaskMode.CLASSIFICATION and self.d < 2:
            raise ValueError("classification scenarios need d >= 2 classes")
        previous = 1
        for point in self.change_points:
            if not previous < point < self.horizon:
                raise ValueError(
                    f"change_points must be strictly increasing within (1, {self.horizon}), got {self.change_points}"
                )
            previous = point
        if self.delay >= self.horizon:
            raise ValueError(f"delay must be < horizon ({self.delay} >= {self.horizon})")
        for behavior in self.experts:
            if isinstance(behavior, Biased) and len(behavior.offset) != self.d:
                raise ValueError(f"biased offset has length {len(behavior.offset)}, expected d = {self.d}")
        return self

class CsvInputSpec(BaseModel):
    """Externally produced expert stream"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    path: str
    mode: TaskMode
    m: int = Field(ge=2)
    d: Optional[int] = Field(None, ge=1)
    delay: int = Field(0, ge=0)

# =============================================================================
# EXPERIMENT MODELS
# =============================================================================

class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    aggregators: List[AggregatorSpec] = Field(min_length=1)
    scenario: Optional[ScenarioSpec] = None
    csv_input: Optional[CsvInputSpec] = None
    seeds: List[Annotated[int, Field(ge=0, lt=2 ** 64)]] = Field(min_length=1)
    loss: LossKind = ZeroOneArgmax()
    output_dir: str = settings.OUTPUT_DIR
    ablation_grid: Dict[str, List[float]] = {}
    write_snapshots: bool = False

    @model_validator(mode="before")
    @classmethod
    def _default_loss_bound(cls, data: Any) -> Any:
        # a regression "sq" loss without a bound is scaled to the target box
        if not isinstance(data, dict) or not isinstance(data.get("loss"), dict):
            return data
        loss = data["loss"]
        if loss.get("kind") != "sq" or "bound" in loss:
            return data
        source = data.get("scenario") or data.get("csv_input")
        if isinstance(source, BaseModel):
            source = source.model_dump()
        if not isinstance(source, dict) or source.get("mode") != TaskMode.REGRESSION:
            return data
        d = source.get("d")
        if d is None:
            raise ValueError("loss.bound is required for regression CSV input without a declared d")
        if not isinstance(d, int) or isinstance(d, bool) or d < 1:
            return data
        return {**data, "loss": {**loss, "bound": regression_loss_bound(d)}}

    @model_validator(mode="after")
    def _check_experiment(self) -> "ExperimentConfig":
        if (self.scenario is None) == (self.csv_input is None):
            raise ValueError("exactly one of [scenario] or csv_input must be given")
        names = [spec.name for spec in self.aggregators]
        if len(set(names)) != len(names):
            raise ValueError(f"aggregator names must be unique, got {names}")
        for key, values in self.ablation_grid.items():
            if key not in GRID_PARAMETERS:
                raise ValueError(f"grid parameter {key!r} is not an EarcpConfig field")
            if not values:
                raise ValueError(f"grid parameter {key!r} has no values")
        mode = self.scenario.mode if self.scenario is not None else self.csv_input.mode
        if mode == TaskMode.REGRESSION and self.loss.kind != "sq":
            raise ValueError(f"loss {self.loss.kind!r} needs class distributions; use 'sq' for regression")
        return self

    @property
    def mode(self) -> TaskMode:
        return self.scenario.mode if self.scenario is not None else self.csv_input.mode

    @property
    def expert_count(self) -> int:
        return self.scenario.m if self.scenario is not None else self.csv_input.m

# =============================================================================
# PERSISTENCE MODELS
# =============================================================================

class PendingRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step: int
    predictions: List[List[float]]
    predicted_classes: Optional[List[int]] = None
    ensemble_prediction: List[float]

class BacklogRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step: int
    losses: List[float]
    ensemble_loss: float

class SerializedState(BaseModel):
    """JSON snapshot of an EARCP session"""
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    mode: TaskMode
    config: EarcpConfig
    loss: LossKind
    seed: int
    m: int = Field(ge=2)
    t: int = Field(ge=0)
    next_step: int = Field(ge=1)
    folded_step: int = Field(ge=0)
    d: Optional[int] = Field(None, ge=1)
    weights: List[float]
    perf: List[float]
    coh: List[float]
    perf_history: List[Tuple[float, float]]
    coh_history: List[Tuple[float, float]]
    cum_loss: List[float]
    cum_ensemble_loss: float
    pending: List[PendingRecord] = []
    loss_backlog: List[BacklogRecord] = []
    renormalization_events: int = 0

    @model_validator(mode="after")
    def _check_lengths(self) -> "SerializedState":
        for name in ("weights", "perf", "coh", "cum_loss"):
            if len(getattr(self, name)) != self.m:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected m = {self.m}")
        return self

# =============================================================================
# STEP RECORDS
# =============================================================================

@dataclass(frozen=True, eq=False)
class CoherenceReport:
    raw: np.ndarray
    pairs_evaluated: int

@dataclass(frozen=True, eq=False)
class StepOutcome:
    step: int
    ensemble_prediction: PredictionVector
    ensemble_loss: float
    per_expert_losses: np.ndarray
    new_weights: np.ndarray
    scores: np.ndarray
    entropy: float
    predicted_classes: Optional[np.ndarray] = None

@dataclass(frozen=True, eq=False)
class ExperimentRecord:
    """One row of a run trace"""
    step: int
    ensemble_loss: float
    per_expert_loss: np.ndarray
    weights: np.ndarray
    entropy: float
    scores: np.ndarray

    @classmethod
    def from_outcome(cls, outcome: StepOutcome) -> "ExperimentRecord":
        return cls(
            step=outcome.step,
            ensemble_loss=outcome.ensemble_loss,
            per_expert_loss=outcome.per_expert_losses,
            weights=outcome.new_weights,
            entropy=outcome.entropy,
            scores=outcome.scores,
        )

@dataclass(frozen=True)
class RunMetrics:
    regret: float
    cumulative_loss: float
    mean_entropy: float
    min_entropy: float
    segment_regrets: List[float] = field(default_factory=list)

@dataclass(frozen=True)
class SummaryStat:
    metric: str
    n: int
    mean: float
    std: float
    ci_low: float
    ci_high: float

# =============================================================================
# SESSION STATE
# =============================================================================

@dataclass(eq=False)
class AggregatorState:
    """Mutable per-session statistics. History rings hold each snapshot's (min, max) across experts."""
    m: int
    t: int
    weights: np.ndarray
    perf: np.ndarray
    coh: np.ndarray
    perf_history: Deque[Tuple[float, float]]
    coh_history: Deque[Tuple[float, float]]
    cum_loss: np.ndarray
    cum_ensemble_loss: float = 0.0

    @classmethod
    def initial(cls, m: int, norm_window: Optional[int] = None) -> "AggregatorState":
        # an unbounded window keeps one running-extrema entry
        maxlen = norm_window if norm_window is not None else 1
        return cls(
            m=m,
            t=0,
            weights=np.full(m, 1.0 / m),
            perf=np.zeros(m),
            coh=np.full(m, 0.5),
            perf_history=deque(maxlen=maxlen),
            coh_history=deque(maxlen=maxlen),
            cum_loss=np.zeros(m),
        )

# =============================================================================
# EXPERIMENT CELLS
# =============================================================================

class CellJob(BaseModel):
    """One (aggregator x grid cell x seed) unit of work"""
    model_config = ConfigDict(extra="forbid")

    config_json: str
    aggregator_index: int = Field(ge=0)
    cell: int = Field(ge=0)
    params: List[Tuple[str, float]] = []
    seed: int = Field(ge=0, lt=2 ** 64)
    staging_dir: str

class CellResult(BaseModel):
    model_config = ConfigDict(extra="forbid")

    aggregator: str
    kind: AggregatorKind
    cell: int
    params: List[Tuple[str, float]] = []
    seed: int
    steps: int
    regret: float
    cumulative_loss: float
    mean_entropy: float
    min_entropy: float
    segment_regrets: List[float] = []
    trace_file: str
    snapshot_file: Optional[str] = None

    def run_metrics(self) -> RunMetrics:
        return RunMetrics(
            regret=self.regret,
            cumulative_loss=self.cumulative_loss,
            mean_entropy=self.mean_entropy,
            min_entropy=self.min_entropy,
            segment_regrets=list(self.segment_regrets),
        )
