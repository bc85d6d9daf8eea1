import logging
from typing import Optional

from earcp_lab.core.config import settings
from earcp_lab.models.schemas import AggregatorKind, AggregatorSpec, LossKind, TaskMode
from earcp_lab.services.aggregator import EarcpAggregator, OnlineAggregator
from earcp_lab.services.baselines import BaselineAggregator

logger = logging.getLogger(__name__)

def build_aggregator(spec: AggregatorSpec, m: int, mode: TaskMode, loss: LossKind, seed: int = 0,
                     horizon: Optional[int] = None,
                     max_pending: int = settings.MAX_PENDING_FEEDBACK) -> OnlineAggregator:
    """Instantiate the session described by an [aggregator.NAME] section"""
    if spec.kind == AggregatorKind.EARCP:
        aggregator = EarcpAggregator(spec.earcp, m, mode, loss, seed=seed, max_pending=max_pending)
    else:
        aggregator = BaselineAggregator(spec.baseline, m, mode, loss, horizon=horizon, max_pending=max_pending)
    logger.debug(f"Built {spec.kind.value} aggregator '{spec.name}' for M={m} ({mode.value})")
    return aggregator
