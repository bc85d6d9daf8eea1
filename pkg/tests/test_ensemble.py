import math

import numpy as np
import pytest

from earcp_lab.core.errors import ContractError, StructuralError
from earcp_lab.models.schemas import TaskMode
from earcp_lab.services.ensemble import (
    combine_predictions, combine_with_report, ema, hedge_weights, minmax_normalize, scores_to_weights,
    weight_entropy
)


def test_combine_symmetric_weights():
    result = combine_predictions([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0]])
    assert result.tolist() == [0.5, 0.5]


def test_combine_identity_weights():
    p = [0.3, 0.7]
    result = combine_predictions([1.0, 0.0], [p, [0.9, 0.1]])
    assert result.tolist() == p


def test_combine_hand_evaluated():
    result = combine_predictions([0.25, 0.75], [[0.8, 0.2], [0.4, 0.6]])
    assert result == pytest.approx([0.5, 0.5], abs=1e-12)


def test_combine_is_linear_in_weights():
    rng = np.random.default_rng(3)
    for _ in range(200):
        m, d = rng.integers(2, 8), rng.integers(1, 6)
        predictions = rng.normal(size=(m, d))
        w1 = rng.dirichlet(np.ones(m))
        w2 = rng.dirichlet(np.ones(m))
        lam = rng.uniform()
        mixed = combine_predictions(lam * w1 + (1 - lam) * w2, predictions)
        expected = lam * combine_predictions(w1, predictions) + (1 - lam) * combine_predictions(w2, predictions)
        assert np.max(np.abs(mixed - expected)) <= 1e-12


def test_combine_rejects_dimension_mismatch():
    with pytest.raises(StructuralError):
        combine_predictions([0.5, 0.5], [[1.0, 0.0], [0.0, 1.0, 0.0]])
    with pytest.raises(StructuralError):
        combine_predictions([0.2, 0.3, 0.5], [[1.0, 0.0], [0.0, 1.0]])


def test_combine_rejects_off_simplex_weights():
    with pytest.raises(ContractError):
        combine_predictions([0.5, 0.6], [[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ContractError):
        combine_predictions([1.5, -0.5], [[1.0, 0.0], [0.0, 1.0]])


def test_classification_output_stays_on_simplex():
    rng = np.random.default_rng(11)
    for _ in range(100):
        predictions = rng.dirichlet(np.ones(4), size=6)
        weights = rng.dirichlet(np.ones(6))
        combined, _ = combine_with_report(weights, predictions, TaskMode.CLASSIFICATION)
        assert abs(combined.sum() - 1.0) <= 1e-9
        assert np.all(combined >= 0)


def test_entropy_examples():
    assert weight_entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)
    assert weight_entropy([1.0, 0.0, 0.0]) == 0.0
    assert weight_entropy([0.9, 0.1]) == pytest.approx(0.325083, abs=1e-6)


def test_entropy_bounds_on_random_simplex():
    rng = np.random.default_rng(5)
    for m in range(2, 12):
        for _ in range(50):
            w = rng.dirichlet(np.full(m, 0.3))
            assert 0.0 <= weight_entropy(w) <= math.log(m)


def test_ema_step():
    assert ema(np.array([-0.10]), np.array([-0.5]), 0.9)[0] == pytest.approx(-0.14, abs=1e-12)


def test_minmax_single_snapshot():
    perf = np.array([-0.2, -0.5, -0.35])
    normalized = minmax_normalize(perf, perf.min(), perf.max(), 1e-8)
    assert normalized == pytest.approx([1.0, 0.0, 0.5], abs=1e-6)


def test_floor_then_renormalize():
    pre_floor, final = scores_to_weights(np.array([1.0, 0.0]), eta_s=5.0, w_min=0.05)
    assert pre_floor == pytest.approx([0.993307, 0.006693], abs=1e-6)
    assert final == pytest.approx([0.952076, 0.047924], abs=1e-6)
    # renormalization pushed the floored weight below w_min
    assert final[1] < 0.05


def test_softmax_shift_invariance():
    rng = np.random.default_rng(8)
    for _ in range(100):
        scores = rng.uniform(-10, 10, size=5)
        shift = rng.uniform(-5, 5)
        _, base = scores_to_weights(scores, 5.0, 0.0)
        _, shifted = scores_to_weights(scores + shift, 5.0, 0.0)
        assert np.max(np.abs(base - shifted)) <= 1e-12


def test_hedge_weights_example():
    assert hedge_weights(np.array([1.0, 0.0]), 0.5) == pytest.approx([0.377541, 0.622459], abs=1e-6)
    assert hedge_weights(np.array([2.0, 2.0, 2.0]), 0.5) == pytest.approx([1 / 3] * 3, abs=1e-15)
