import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from earcp_lab.core.errors import ContractError, StructuralError
from earcp_lab.models.schemas import PredictionVector, TaskMode

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-9

def as_prediction(values: Sequence[float], mode: Optional[TaskMode] = None,
                  tolerance: float = SIMPLEX_TOLERANCE) -> PredictionVector:
    """Coerce values into a validated 1-D prediction vector"""
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise StructuralError(f"prediction must be a non-empty 1-D vector, got shape {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise ContractError("prediction contains non-finite values")
    if mode == TaskMode.CLASSIFICATION:
        if np.any(vector < -tolerance) or abs(vector.sum() - 1.0) > tolerance:
            raise ContractError(f"classification prediction is off the simplex (sum={vector.sum():.12g})")
    return vector

def stack_predictions(predictions: Sequence[Sequence[float]], m: Optional[int] = None) -> np.ndarray:
    """Stack M predictions into an (M, d) matrix, checking shapes"""
    try:
        matrix = np.asarray(predictions, dtype=np.float64)
    except ValueError as e:
        raise StructuralError(f"predictions have mismatched lengths: {e}") from e
    if matrix.ndim != 2 or matrix.shape[1] == 0:
        raise StructuralError(f"expected M predictions of equal length d >= 1, got shape {matrix.shape}")
    if m is not None and matrix.shape[0] != m:
        raise StructuralError(f"expected {m} expert predictions, got {matrix.shape[0]}")
    if not np.all(np.isfinite(matrix)):
        raise ContractError("predictions contain non-finite values")
    return matrix

def check_simplex(weights: Sequence[float], tolerance: float = SIMPLEX_TOLERANCE) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise StructuralError(f"weights must be a non-empty 1-D vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < -tolerance) or abs(math.fsum(w) - 1.0) > tolerance:
        raise ContractError(f"weights are off the simplex (sum={w.sum():.12g}, min={w.min():.3g})")
    return w

def combine_with_report(weights: Sequence[float], predictions: Sequence[Sequence[float]],
                        mode: Optional[TaskMode] = None) -> Tuple[PredictionVector, bool]:
    """Weighted combination plus whether a classification output had to be re-normalized"""
    w = check_simplex(weights)
    matrix = stack_predictions(predictions)
    if matrix.shape[0] != w.size:
        raise StructuralError(f"{w.size} weights for {matrix.shape[0]} predictions")
    combined = (w[:, None] * matrix).sum(axis=0)
    if mode == TaskMode.CLASSIFICATION:
        total = combined.sum()
        if abs(total - 1.0) > SIMPLEX_TOLERANCE:
            logger.debug(f"Re-normalizing ensemble distribution (sum drifted to {total:.17g})")
            return combined / total, True
    return combined, False

def combine_predictions(weights: Sequence[float], predictions: Sequence[Sequence[float]],
                        mode: Optional[TaskMode] = None) -> PredictionVector:
    """p_hat = sum_i w_i p_i"""
    combined, _ = combine_with_report(weights, predictions, mode)
    return combined

def weight_entropy(weights: Sequence[float]) -> float:
    """Shannon entropy (natural log) of a weight vector, 0 ln 0 = 0"""
    w = check_simplex(weights)
    positive = w[w > 0]
    entropy = float(-(positive * np.log(positive)).sum())
    return min(max(entropy, 0.0), math.log(w.size))

def argmax_classes(matrix: np.ndarray) -> np.ndarray:
    """Predicted class per row; ties go to the lowest index"""
    return np.argmax(matrix, axis=1)

def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax"""
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()

def ema(previous: np.ndarray, value: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * previous + (1.0 - alpha) * value

def minmax_normalize(values: np.ndarray, low: float, high: float, epsilon: float) -> np.ndarray:
    return (values - low) / (high - low + epsilon)

def scores_to_weights(scores: np.ndarray, eta_s: float, w_min: float) -> Tuple[np.ndarray, np.ndarray]:
    """Exponentiate, normalize, floor at w_min and renormalize.

    Returns (pre-floor weights, final weights). The final renormalization can push a
    floored weight below w_min; it never goes below w_min / (1 + M * w_min).
    """
    pre_floor = softmax(eta_s * scores)
    floored = np.maximum(pre_floor, w_min)
    return pre_floor, floored / floored.sum()

def hedge_weights(cum_losses: np.ndarray, eta: float) -> np.ndarray:
    """Exponential weights w_i proportional to exp(-eta * cumulative loss_i)"""
    return softmax(-eta * np.asarray(cum_losses, dtype=np.float64))
