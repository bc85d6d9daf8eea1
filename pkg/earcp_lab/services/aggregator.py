import logging
from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
from pydantic import ValidationError

from earcp_lab.core.config import settings
from earcp_lab.core.errors import (
    FeedbackMatchingError, FeedbackOverflowError, ModeError, PersistenceError, StructuralError
)
from earcp_lab.models.schemas import (
    SCHEMA_VERSION, AggregatorState, BacklogRecord, EarcpConfig, LossKind, PendingRecord,
    PredictionVector, SerializedState, StepOutcome, TaskMode
)
from earcp_lab.services.coherence import (
    classification_coherence, regression_coherence, sampled_coherence, smooth_coherence
)
from earcp_lab.services.ensemble import (
    argmax_classes, as_prediction, combine_with_report, ema, hedge_weights, minmax_normalize,
    scores_to_weights, stack_predictions, weight_entropy
)
from earcp_lab.services.losses import evaluate_loss, evaluate_losses
from earcp_lab.utils.helpers import render_json

logger = logging.getLogger(__name__)

# Expert predictions from external files are accepted on the simplex up to this slack
PREDICTION_TOLERANCE = 1e-6

# =============================================================================
# REPLAY BUFFER
# =============================================================================

@dataclass(eq=False)
class PendingEntry:
    step: int
    predictions: np.ndarray
    predicted_classes: Optional[np.ndarray]
    ensemble_prediction: PredictionVector

class PendingFeedback:
    """Predictions issued but not yet matched with a target, ordered by step"""

    def __init__(self, capacity: int = settings.MAX_PENDING_FEEDBACK):
        self.capacity = capacity
        self._entries: "OrderedDict[int, PendingEntry]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, entry: PendingEntry) -> None:
        if len(self._entries) >= self.capacity:
            message = (f"replay buffer full ({self.capacity} pending steps); "
                       f"oldest pending step is {next(iter(self._entries))}")
            logger.error(message)
            raise FeedbackOverflowError(message)
        self._entries[entry.step] = entry

    def get(self, step: int) -> PendingEntry:
        try:
            return self._entries[step]
        except KeyError:
            logger.error(f"Feedback for step {step} matches no pending prediction")
            raise FeedbackMatchingError(f"no pending predictions for step {step}") from None

    def discard(self, step: int) -> None:
        self._entries.pop(step, None)

    def entries(self) -> List[PendingEntry]:
        return list(self._entries.values())

# =============================================================================
# SHARED SESSION MACHINERY
# =============================================================================

class OnlineAggregator:
    """Predict/update session over M experts shared by EARCP and the baselines.

    One session is single-writer: calls to predict and update must be serialized.
    """

    def __init__(self, m: int, mode: TaskMode, loss: LossKind, norm_window: Optional[int] = 1,
                 max_pending: int = settings.MAX_PENDING_FEEDBACK):
        if m < 2:
            raise StructuralError(f"an aggregator needs at least 2 experts, got {m}")
        self.m = m
        self.mode = TaskMode(mode)
        self.loss = loss
        self.state = AggregatorState.initial(m, norm_window)
        self.pending = PendingFeedback(max_pending)
        self.next_step = 1
        self.folded_step = 0
        self.renormalization_events = 0
        self.d: Optional[int] = None
        self._backlog: Dict[int, Tuple[np.ndarray, float]] = {}

    @property
    def weights(self) -> np.ndarray:
        return self.state.weights.copy()

    @property
    def issued_step(self) -> int:
        """Step id assigned to the most recent predict call (0 before the first)"""
        return self.next_step - 1

    def predict(self, predictions: Sequence[Sequence[float]]) -> PredictionVector:
        """Combine expert predictions with the current weights and queue them for feedback"""
        matrix = stack_predictions(predictions, self.m)
        self._check_dimension(matrix.shape[1])
        classes = None
        if self.mode == TaskMode.CLASSIFICATION:
            for row in matrix:
                as_prediction(row, self.mode, PREDICTION_TOLERANCE)
            classes = argmax_classes(matrix)
        ensemble, renormalized = combine_with_report(self.state.weights, matrix, self.mode)
        if renormalized:
            self.renormalization_events += 1
            logger.debug(f"Re-normalized ensemble output at step {self.next_step} "
                         f"({self.renormalization_events} events so far)")
        self.pending.push(PendingEntry(self.next_step, matrix, classes, ensemble))
        self.next_step += 1
        return ensemble

    def update(self, step: int, target: Sequence[float]) -> StepOutcome:
        """Reveal the target for a previously predicted step and reweight"""
        entry = self.pending.get(step)
        y = as_prediction(target)
        if y.size != entry.predictions.shape[1]:
            raise StructuralError(f"target has length {y.size}, predictions have {entry.predictions.shape[1]}")
        losses = evaluate_losses(self.loss, entry.predictions, y)
        ensemble_loss = evaluate_loss(self.loss, entry.ensemble_prediction, y)
        self.pending.discard(step)
        self._fold_losses(step, losses, ensemble_loss)

        weights, scores = self._reweight(entry, losses)
        self.state.weights = weights
        self.state.t += 1
        return StepOutcome(
            step=step,
            ensemble_prediction=entry.ensemble_prediction,
            ensemble_loss=ensemble_loss,
            per_expert_losses=losses,
            new_weights=weights.copy(),
            scores=scores,
            entropy=weight_entropy(weights),
            predicted_classes=entry.predicted_classes,
        )

    def _reweight(self, entry: PendingEntry, losses: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _check_dimension(self, d: int) -> None:
        if self.d is None:
            self.d = d
        elif d != self.d:
            raise StructuralError(f"prediction length changed from {self.d} to {d} within a session")

    def _fold_losses(self, step: int, losses: np.ndarray, ensemble_loss: float) -> None:
        # cumulative sums advance in step order; early arrivals wait for the gap to close
        self._backlog[step] = (losses, ensemble_loss)
        while self.folded_step + 1 in self._backlog:
            step_losses, step_ensemble = self._backlog.pop(self.folded_step + 1)
            self.state.cum_loss = self.state.cum_loss + step_losses
            self.state.cum_ensemble_loss += step_ensemble
            self.folded_step += 1

# =============================================================================
# EARCP
# =============================================================================

class EarcpAggregator(OnlineAggregator):
    """Performance/coherence weighted ensemble (exponential scores with a weight floor)"""

    def __init__(self, config: EarcpConfig, m: int, mode: TaskMode, loss: LossKind, seed: int = 0,
                 max_pending: int = settings.MAX_PENDING_FEEDBACK):
        config.check_expert_count(m)
        super().__init__(m, mode, loss, norm_window=config.norm_window, max_pending=max_pending)
        self.config = config
        self.seed = seed

    def update_hedge_compat(self, step: int, target: Sequence[float]) -> StepOutcome:
        """Exact Hedge over cumulative losses; requires hedge_compat in the config"""
        if not self.config.hedge_compat:
            raise ModeError("update_hedge_compat needs a session built with hedge_compat = true")
        return self.update(step, target)

    def _reweight(self, entry: PendingEntry, losses: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if self.config.hedge_compat:
            eta = self.config.hedge_eta
            return hedge_weights(self.state.cum_loss, eta), -eta * self.state.cum_loss
        return self._reweight_earcp(entry, losses)

    def _reweight_earcp(self, entry: PendingEntry, losses: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        config = self.config
        state = self.state

        state.perf = ema(state.perf, -losses, config.alpha_p)
        raw = self._coherence(entry).raw
        state.coh = smooth_coherence(state.coh, raw, config.alpha_c)

        perf_low, perf_high = self._push_extrema(state.perf_history, state.perf)
        coh_low, coh_high = self._push_extrema(state.coh_history, state.coh)
        perf_tilde = minmax_normalize(state.perf, perf_low, perf_high, config.epsilon)
        coh_tilde = minmax_normalize(state.coh, coh_low, coh_high, config.epsilon)

        scores = np.clip(config.beta * perf_tilde + (1.0 - config.beta) * coh_tilde,
                         -config.s_max, config.s_max)
        _, weights = scores_to_weights(scores, config.eta_s, config.w_min)
        return weights, scores

    def _coherence(self, entry: PendingEntry):
        k = self.config.coherence_sample_k
        if self.mode == TaskMode.CLASSIFICATION:
            if k is None:
                return classification_coherence(entry.predicted_classes)
            return sampled_coherence(k, self.seed, entry.step, predicted_classes=entry.predicted_classes)
        if k is None:
            return regression_coherence(entry.predictions, self.config.gamma)
        return sampled_coherence(k, self.seed, entry.step, predictions=entry.predictions, gamma=self.config.gamma)

    def _push_extrema(self, history: deque, values: np.ndarray) -> Tuple[float, float]:
        """Record this snapshot and return (min, max) over experts and the window"""
        low, high = float(values.min()), float(values.max())
        if self.config.norm_window is None and history:
            previous_low, previous_high = history[-1]
            low, high = min(low, previous_low), max(high, previous_high)
        history.append((low, high))
        return min(entry[0] for entry in history), max(entry[1] for entry in history)

    # -------------------------------------------------------------------------
    # persistence
    # -------------------------------------------------------------------------

    def snapshot(self) -> SerializedState:
        """Immutable serializable copy of the full session"""
        state = self.state
        return SerializedState(
            schema_version=SCHEMA_VERSION,
            mode=self.mode,
            config=self.config,
            loss=self.loss,
            seed=self.seed,
            m=self.m,
            t=state.t,
            next_step=self.next_step,
            folded_step=self.folded_step,
            d=self.d,
            weights=state.weights.tolist(),
            perf=state.perf.tolist(),
            coh=state.coh.tolist(),
            perf_history=list(state.perf_history),
            coh_history=list(state.coh_history),
            cum_loss=state.cum_loss.tolist(),
            cum_ensemble_loss=state.cum_ensemble_loss,
            pending=[
                PendingRecord(
                    step=entry.step,
                    predictions=entry.predictions.tolist(),
                    predicted_classes=None if entry.predicted_classes is None else entry.predicted_classes.tolist(),
                    ensemble_prediction=entry.ensemble_prediction.tolist(),
                )
                for entry in self.pending.entries()
            ],
            loss_backlog=[
                BacklogRecord(step=step, losses=losses.tolist(), ensemble_loss=ensemble_loss)
                for step, (losses, ensemble_loss) in sorted(self._backlog.items())
            ],
            renormalization_events=self.renormalization_events,
        )

    def snapshot_json(self) -> str:
        """Snapshot rendered as JSON with 17-significant-digit reals"""
        return render_json(self.snapshot().model_dump(mode="json"))

    @classmethod
    def restore(cls, snapshot: Union[SerializedState, str, bytes],
                max_pending: int = settings.MAX_PENDING_FEEDBACK) -> "EarcpAggregator":
        """Rebuild a session that continues bitwise-identically to the snapshotted one"""
        try:
            snapshot = cls._load_snapshot(snapshot)
        except PersistenceError as e:
            logger.error(f"Failed to restore EARCP session: {e}")
            raise

        aggregator = cls(snapshot.config, snapshot.m, snapshot.mode, snapshot.loss,
                         seed=snapshot.seed, max_pending=max_pending)
        state = aggregator.state
        state.t = snapshot.t
        state.weights = np.array(snapshot.weights, dtype=np.float64)
        state.perf = np.array(snapshot.perf, dtype=np.float64)
        state.coh = np.array(snapshot.coh, dtype=np.float64)
        state.perf_history.extend(tuple(entry) for entry in snapshot.perf_history)
        state.coh_history.extend(tuple(entry) for entry in snapshot.coh_history)
        state.cum_loss = np.array(snapshot.cum_loss, dtype=np.float64)
        state.cum_ensemble_loss = snapshot.cum_ensemble_loss
        aggregator.next_step = snapshot.next_step
        aggregator.folded_step = snapshot.folded_step
        aggregator.d = snapshot.d
        aggregator.renormalization_events = snapshot.renormalization_events
        for record in snapshot.pending:
            aggregator.pending.push(PendingEntry(
                step=record.step,
                predictions=np.array(record.predictions, dtype=np.float64),
                predicted_classes=None if record.predicted_classes is None else np.array(record.predicted_classes),
                ensemble_prediction=np.array(record.ensemble_prediction, dtype=np.float64),
            ))
        for record in snapshot.loss_backlog:
            aggregator._backlog[record.step] = (np.array(record.losses, dtype=np.float64), record.ensemble_loss)

        logger.info(f"Restored EARCP session: M={snapshot.m}, t={snapshot.t}, {len(snapshot.pending)} pending steps")
        return aggregator

    @staticmethod
    def _load_snapshot(snapshot: Union[SerializedState, str, bytes]) -> SerializedState:
        if isinstance(snapshot, SerializedState):
            if snapshot.schema_version != SCHEMA_VERSION:
                raise PersistenceError(f"unsupported snapshot schema_version {snapshot.schema_version}")
            return snapshot
        try:
            payload = orjson.loads(snapshot)
        except orjson.JSONDecodeError as e:
            raise PersistenceError(f"snapshot is not valid JSON: {e}") from e
        if not isinstance(payload, dict):
            raise PersistenceError("snapshot must be a JSON object")
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise PersistenceError(
                f"unsupported snapshot schema_version {payload.get('schema_version')!r} (expected {SCHEMA_VERSION})"
            )
        try:
            return SerializedState.model_validate(payload)
        except ValidationError as e:
            raise PersistenceError(f"corrupt snapshot: {e}") from e
