import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from earcp_lab.core.config import settings
from earcp_lab.core.errors import ContractError
from earcp_lab.models.schemas import BaselineKind, FollowTheLeader, Hedge, LossKind, TaskMode, Uniform
from earcp_lab.services.aggregator import OnlineAggregator, PendingEntry
from earcp_lab.services.ensemble import hedge_weights

logger = logging.getLogger(__name__)

def hedge_eta_for(m: int, t: Optional[int] = None, horizon: Optional[int] = None) -> float:
    """sqrt(2 ln M / T) for a declared horizon, else the anytime sqrt(2 ln M / t)"""
    rounds = horizon if horizon is not None else t
    if rounds is None or rounds < 1:
        raise ContractError("Hedge needs a positive horizon or step count to set its learning rate")
    return math.sqrt(2.0 * math.log(m) / rounds)

def baseline_update(kind: BaselineKind, cum_losses: Sequence[float], t: Optional[int] = None,
                    horizon: Optional[int] = None) -> np.ndarray:
    """Weights of a reference aggregator given the cumulative per-expert losses"""
    cum = np.asarray(cum_losses, dtype=np.float64)
    if cum.ndim != 1 or cum.size == 0 or not np.all(np.isfinite(cum)):
        raise ContractError("cumulative losses must be a finite non-empty vector")
    m = cum.size
    if isinstance(kind, Hedge):
        eta = kind.eta if kind.eta is not None else hedge_eta_for(m, t, horizon)
        return hedge_weights(cum, eta)
    if isinstance(kind, Uniform):
        return np.full(m, 1.0 / m)
    if isinstance(kind, FollowTheLeader):
        weights = np.zeros(m)
        weights[int(np.argmin(cum))] = 1.0
        return weights
    raise ContractError(f"unknown baseline kind {kind!r}")

def hedge_trajectory(loss_matrix: np.ndarray, eta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Hedge weights played at every step of a (T, M) loss matrix, and the cumulative losses.

    Row t of the weights is the distribution used before the losses of step t are revealed.
    """
    losses = np.asarray(loss_matrix, dtype=np.float64)
    if losses.ndim != 2 or losses.shape[0] == 0:
        raise ContractError(f"loss matrix must be (T, M) with T >= 1, got shape {losses.shape}")
    cumulative = np.cumsum(losses, axis=0)
    prior = np.vstack([np.zeros((1, losses.shape[1])), cumulative[:-1]])
    logits = -eta * prior
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights, cumulative

def mixture_regret(loss_matrix: np.ndarray, eta: float) -> float:
    """Regret of the Hedge mixture loss against the best expert in hindsight"""
    weights, cumulative = hedge_trajectory(loss_matrix, eta)
    return float((weights * np.asarray(loss_matrix)).sum() - cumulative[-1].min())

class BaselineAggregator(OnlineAggregator):
    """Hedge, equal weighting or follow-the-leader behind the session interface"""

    def __init__(self, kind: BaselineKind, m: int, mode: TaskMode, loss: LossKind,
                 horizon: Optional[int] = None, max_pending: int = settings.MAX_PENDING_FEEDBACK):
        super().__init__(m, mode, loss, max_pending=max_pending)
        self.kind = kind
        self.horizon = horizon

    def _reweight(self, entry: PendingEntry, losses: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        cum = self.state.cum_loss
        if isinstance(self.kind, Hedge):
            # the anytime rate counts the steps folded into cum_loss
            eta = self.kind.eta if self.kind.eta is not None else hedge_eta_for(
                self.m, max(self.folded_step, 1), self.horizon)
            return baseline_update(Hedge(eta=eta), cum), -eta * cum
        weights = baseline_update(self.kind, cum)
        if isinstance(self.kind, FollowTheLeader):
            scores = -cum
        else:
            scores = np.zeros(self.m)
        return weights, scores
