import logging
from typing import Optional, Sequence

import numpy as np

from earcp_lab.core.errors import ConfigurationError, ContractError
from earcp_lab.models.schemas import CoherenceReport
from earcp_lab.services.ensemble import ema, stack_predictions
from earcp_lab.utils.helpers import KeyedStream

logger = logging.getLogger(__name__)

def _check_count(m: int) -> None:
    if m < 2:
        raise ConfigurationError(f"coherence needs at least 2 experts, got {m}")

def _check_gamma(gamma: float) -> None:
    if not gamma > 0:
        raise ConfigurationError(f"gamma must be > 0, got {gamma}")

def classification_coherence(predicted_classes: Sequence[int]) -> CoherenceReport:
    """Fraction of the other experts predicting the same class"""
    classes = np.asarray(predicted_classes)
    m = classes.size
    _check_count(m)
    agreement = classes[:, None] == classes[None, :]
    np.fill_diagonal(agreement, False)
    raw = agreement.sum(axis=1) / (m - 1)
    return CoherenceReport(raw=raw.astype(np.float64), pairs_evaluated=m * (m - 1) // 2)

def regression_coherence(predictions: Sequence[Sequence[float]], gamma: float) -> CoherenceReport:
    """Mean RBF similarity exp(-gamma ||p_i - p_j||^2) to the other experts"""
    matrix = stack_predictions(predictions)
    m = matrix.shape[0]
    _check_count(m)
    _check_gamma(gamma)
    diff = matrix[None, :, :] - matrix[:, None, :]
    kernel = np.exp(-gamma * (diff * diff).sum(axis=-1))
    off_diagonal = kernel[~np.eye(m, dtype=bool)].reshape(m, m - 1)
    raw = off_diagonal.sum(axis=1) / (m - 1)
    return CoherenceReport(raw=raw, pairs_evaluated=m * (m - 1) // 2)

def sampled_coherence(k: int, rng_seed: int, t: int,
                      predicted_classes: Optional[Sequence[int]] = None,
                      predictions: Optional[Sequence[Sequence[float]]] = None,
                      gamma: Optional[float] = None) -> CoherenceReport:
    """Coherence estimated from k peers per expert, drawn without replacement.

    Peers for expert i come from the SplitMix64 stream keyed by (rng_seed, t, i).
    Pass predicted_classes for classification, or predictions and gamma for regression.
    """
    if (predicted_classes is None) == (predictions is None):
        raise ContractError("pass exactly one of predicted_classes or predictions")
    if predicted_classes is not None:
        classes = [int(c) for c in predicted_classes]
        m = len(classes)
    else:
        matrix = stack_predictions(predictions)
        m = matrix.shape[0]
        _check_gamma(gamma)
    _check_count(m)
    if not 1 <= k <= m - 1:
        raise ConfigurationError(f"sample size k must lie in [1, {m - 1}], got {k}")

    keyed = KeyedStream(rng_seed)
    raw = np.empty(m, dtype=np.float64)
    for i in range(m):
        positions = keyed.stream(t, i).sample_indices(m - 1, k)
        # position p in the peer list {0..m-1} minus {i}
        peers = sorted(p if p < i else p + 1 for p in positions)
        if predicted_classes is not None:
            own = classes[i]
            raw[i] = sum(1 for j in peers if classes[j] == own) / k
        else:
            diff = matrix[peers] - matrix[i]
            raw[i] = np.exp(-gamma * (diff * diff).sum(axis=1)).sum() / k
    logger.debug(f"Sampled coherence at t={t}: M={m}, k={k}")
    return CoherenceReport(raw=raw, pairs_evaluated=m * k)

def smooth_coherence(previous: Sequence[float], raw: Sequence[float], alpha_c: float) -> np.ndarray:
    """C_bar <- alpha_c * C_bar + (1 - alpha_c) * C"""
    if not 0.0 < alpha_c < 1.0:
        raise ConfigurationError(f"alpha_c must lie in (0, 1), got {alpha_c}")
    prev = np.asarray(previous, dtype=np.float64)
    current = np.asarray(raw, dtype=np.float64)
    return np.clip(ema(prev, current, alpha_c), 0.0, 1.0)
