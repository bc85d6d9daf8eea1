"""Bounded loss functions mapping (prediction, target) pairs into [0, 1]."""

import logging
import math
from typing import Dict, Type, Union

import numpy as np

from earcp_lab.core.errors import ContractError, StructuralError
from earcp_lab.models.schemas import (
    ClippedCrossEntropy, PredictionVector, ScaledSquaredError, ZeroOneArgmax
)

logger = logging.getLogger(__name__)

LossSpec = Union[ScaledSquaredError, ZeroOneArgmax, ClippedCrossEntropy]

LOSS_KEYS: Dict[str, Type] = {
    "sq": ScaledSquaredError,
    "zero_one": ZeroOneArgmax,
    "xent": ClippedCrossEntropy,
}

def _check_pair(prediction: np.ndarray, target: np.ndarray) -> None:
    if prediction.shape[-1] != target.shape[-1]:
        raise StructuralError(f"prediction has length {prediction.shape[-1]}, target {target.shape[-1]}")
    if not (np.all(np.isfinite(prediction)) and np.all(np.isfinite(target))):
        raise ContractError("loss inputs contain non-finite values")

def evaluate_loss(kind: LossSpec, prediction: PredictionVector, target: PredictionVector) -> float:
    """L(p, y) in [0, 1] for the configured loss kind"""
    p = np.asarray(prediction, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    _check_pair(p, y)
    return float(evaluate_losses(kind, p[None, :], y)[0])

def evaluate_losses(kind: LossSpec, predictions: np.ndarray, target: PredictionVector) -> np.ndarray:
    """Per-expert losses for an (M, d) prediction matrix against one target"""
    y = np.asarray(target, dtype=np.float64)
    _check_pair(predictions, y)
    if isinstance(kind, ScaledSquaredError):
        squared = ((predictions - y) ** 2).sum(axis=1)
        return np.minimum(1.0, squared / (kind.bound * kind.bound))
    if isinstance(kind, ZeroOneArgmax):
        return (np.argmax(predictions, axis=1) != np.argmax(y)).astype(np.float64)
    if isinstance(kind, ClippedCrossEntropy):
        true_class = int(np.argmax(y))
        probabilities = np.maximum(kind.clip, predictions[:, true_class])
        # -ln(max(clip, p)) / -ln(clip); p above 1 from float drift maps to 0
        return np.clip(np.log(probabilities) / math.log(kind.clip), 0.0, 1.0)
    raise ContractError(f"unknown loss kind {kind!r}")
