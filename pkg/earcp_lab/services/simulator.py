import logging
import math
from collections import deque
from typing import Iterable, Iterator, List, Optional, Tuple

import numpy as np

from earcp_lab.core.errors import ContractError
from earcp_lab.models.schemas import (
    Accurate, AggregatorSpec, Biased, CollusiveWrong, ExperimentRecord, ExpertBehavior, LossKind,
    PredictionVector, RandomGuess, ScaledSquaredError, ScenarioSpec, TaskMode, ZeroOneArgmax,
    regression_loss_bound
)
from earcp_lab.services.aggregator import OnlineAggregator
from earcp_lab.services.factory import build_aggregator
from earcp_lab.utils.helpers import KeyedStream, SplitMix64

logger = logging.getLogger(__name__)

# Stream keys; experts use their own index
TARGET_KEY = 1 << 32
GROUP_KEY_BASE = 1 << 33
CONSTANTS_KEY = 1 << 34

StreamStep = Tuple[int, np.ndarray, PredictionVector]

def default_loss(spec: ScenarioSpec) -> LossKind:
    """0-1 loss for classification, squared error scaled to the target box for regression"""
    if spec.mode == TaskMode.CLASSIFICATION:
        return ZeroOneArgmax()
    return ScaledSquaredError(bound=regression_loss_bound(spec.d))

def behavior_at(spec: ScenarioSpec, t: int, i: int) -> ExpertBehavior:
    """Behavior of expert i at step t; assignments rotate by one at each change point"""
    rotation = sum(1 for point in spec.change_points if point <= t)
    return spec.experts[(i - rotation) % spec.m]

# =============================================================================
# CLASSIFICATION
# =============================================================================

def _one_hot(d: int, k: int) -> np.ndarray:
    vector = np.zeros(d)
    vector[k] = 1.0
    return vector

def _wrong_class(rng: SplitMix64, truth: int, d: int) -> int:
    return (truth + 1 + rng.bounded(d - 1)) % d

def _classification_expert(behavior: ExpertBehavior, target: np.ndarray, truth: int, d: int,
                           rng: SplitMix64, keyed: KeyedStream, t: int) -> np.ndarray:
    if isinstance(behavior, Accurate):
        noise = min(behavior.noise, 1.0)
        if noise == 0.0:
            return target.copy()
        draws = np.array([rng.uniform() for _ in range(d)]) + 1e-12
        return (1.0 - noise) * target + noise * draws / draws.sum()
    if isinstance(behavior, Biased):
        shifted = np.clip(target + np.asarray(behavior.offset), 0.0, None)
        total = shifted.sum()
        return shifted / total if total > 0 else np.full(d, 1.0 / d)
    if isinstance(behavior, RandomGuess):
        return _one_hot(d, rng.bounded(d))
    if isinstance(behavior, CollusiveWrong):
        if rng.uniform() < behavior.agree_prob:
            shared = keyed.stream(t, GROUP_KEY_BASE + behavior.group_id)
            return _one_hot(d, _wrong_class(shared, truth, d))
        return _one_hot(d, _wrong_class(rng, truth, d))
    raise ContractError(f"unknown expert behavior {behavior!r}")

# =============================================================================
# REGRESSION
# =============================================================================

def _regression_constants(keyed: KeyedStream, d: int) -> Tuple[float, float, np.ndarray, np.ndarray]:
    rng = keyed.stream(0, CONSTANTS_KEY)
    slow_period = 50.0 + 150.0 * rng.uniform()
    fast_period = 10.0 + 40.0 * rng.uniform()
    slow_phase = np.array([2.0 * math.pi * rng.uniform() for _ in range(d)])
    fast_phase = np.array([2.0 * math.pi * rng.uniform() for _ in range(d)])
    return slow_period, fast_period, slow_phase, fast_phase

def _regression_target(keyed: KeyedStream, t: int, d: int) -> np.ndarray:
    slow_period, fast_period, slow_phase, fast_phase = _regression_constants(keyed, d)
    rng = keyed.stream(t, TARGET_KEY)
    noise = np.array([rng.gaussian() for _ in range(d)])
    signal = (0.5 * np.sin(2.0 * math.pi * t / slow_period + slow_phase)
              + 0.25 * np.sin(2.0 * math.pi * t / fast_period + fast_phase)
              + 0.05 * noise)
    return np.clip(signal, -1.0, 1.0)

def _regression_expert(behavior: ExpertBehavior, target: np.ndarray, d: int,
                       rng: SplitMix64, keyed: KeyedStream, t: int) -> np.ndarray:
    if isinstance(behavior, Accurate):
        return target + behavior.noise * np.array([rng.gaussian() for _ in range(d)])
    if isinstance(behavior, Biased):
        return target + np.asarray(behavior.offset)
    if isinstance(behavior, RandomGuess):
        return np.array([2.0 * rng.uniform() - 1.0 for _ in range(d)])
    if isinstance(behavior, CollusiveWrong):
        source = keyed.stream(t, GROUP_KEY_BASE + behavior.group_id) if rng.uniform() < behavior.agree_prob else rng
        magnitude = np.array([0.5 + 0.5 * source.uniform() for _ in range(d)])
        sign = np.array([1.0 if source.bounded(2) else -1.0 for _ in range(d)])
        return target + sign * magnitude
    raise ContractError(f"unknown expert behavior {behavior!r}")

# =============================================================================
# STREAMS
# =============================================================================

def generate_step(spec: ScenarioSpec, t: int,
                  rng: Optional[KeyedStream] = None) -> Tuple[np.ndarray, PredictionVector]:
    """Expert predictions (M x d) and the target for step t; a pure function of (spec, t)"""
    if not 1 <= t <= spec.horizon:
        raise ContractError(f"step {t} outside [1, {spec.horizon}]")
    keyed = rng if rng is not None else KeyedStream(spec.seed)
    d = spec.d
    predictions = np.empty((spec.m, d))

    if spec.mode == TaskMode.CLASSIFICATION:
        truth = keyed.stream(t, TARGET_KEY).bounded(d)
        target = _one_hot(d, truth)
        for i in range(spec.m):
            predictions[i] = _classification_expert(
                behavior_at(spec, t, i), target, truth, d, keyed.stream(t, i), keyed, t
            )
    else:
        target = _regression_target(keyed, t, d)
        for i in range(spec.m):
            predictions[i] = _regression_expert(behavior_at(spec, t, i), target, d, keyed.stream(t, i), keyed, t)
    return predictions, target

def scenario_steps(spec: ScenarioSpec) -> Iterator[StreamStep]:
    keyed = KeyedStream(spec.seed)
    for t in range(1, spec.horizon + 1):
        predictions, target = generate_step(spec, t, keyed)
        yield t, predictions, target

def drive_stream(aggregator: OnlineAggregator, steps: Iterable[StreamStep], delay: int = 0) -> List[ExperimentRecord]:
    """Predict every step and reveal each target `delay` steps later, in order"""
    waiting: deque = deque()
    records = []
    for _, predictions, target in steps:
        aggregator.predict(predictions)
        waiting.append((aggregator.issued_step, target))
        if len(waiting) > delay:
            step, revealed = waiting.popleft()
            records.append(ExperimentRecord.from_outcome(aggregator.update(step, revealed)))
    while waiting:
        step, revealed = waiting.popleft()
        records.append(ExperimentRecord.from_outcome(aggregator.update(step, revealed)))
    return records

def run_scenario(spec: ScenarioSpec, aggregator_spec: AggregatorSpec,
                 loss: Optional[LossKind] = None) -> List[ExperimentRecord]:
    """Drive a fresh session over the full horizon and return its trace"""
    loss = loss if loss is not None else default_loss(spec)
    aggregator = build_aggregator(aggregator_spec, spec.m, spec.mode, loss, seed=spec.seed, horizon=spec.horizon)
    records = drive_stream(aggregator, scenario_steps(spec), spec.delay)
    logger.debug(f"Scenario run '{aggregator_spec.name}' finished: {len(records)} steps, seed {spec.seed}")
    return records
