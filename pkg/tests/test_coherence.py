import math
import time

import numpy as np
import pytest

from earcp_lab.core.errors import ConfigurationError, ContractError
from earcp_lab.services.coherence import (
    classification_coherence, regression_coherence, sampled_coherence, smooth_coherence
)


def brute_force_agreement(classes):
    m = len(classes)
    return [sum(1 for j in range(m) if j != i and classes[j] == classes[i]) / (m - 1) for i in range(m)]


def test_classification_examples():
    report = classification_coherence([2, 2, 7])
    assert report.raw.tolist() == [0.5, 0.5, 0.0]
    assert report.pairs_evaluated == 3
    assert classification_coherence([4, 4, 4, 4]).raw.tolist() == [1.0] * 4
    assert classification_coherence([0, 1]).raw.tolist() == [0.0, 0.0]


def test_classification_needs_two_experts():
    with pytest.raises(ConfigurationError):
        classification_coherence([3])


def test_classification_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m = int(rng.integers(2, 15))
        classes = rng.integers(0, 4, size=m)
        assert classification_coherence(classes).raw.tolist() == brute_force_agreement(classes.tolist())


def test_regression_examples():
    assert regression_coherence([[0.3, 0.1]] * 4, gamma=1.0).raw.tolist() == [1.0] * 4
    raw = regression_coherence([[0.0, 0.0], [1.0, 1.0]], gamma=0.5).raw
    assert raw == pytest.approx([math.exp(-1)] * 2, abs=1e-12)
    far = regression_coherence([[0.0], [1.0], [2.0]], gamma=1e6).raw
    assert np.all(far <= 1e-6)


def test_regression_rejects_non_finite():
    with pytest.raises(ContractError):
        regression_coherence([[0.0], [float("inf")]], gamma=1.0)


def test_two_expert_symmetry():
    rng = np.random.default_rng(2)
    for _ in range(100):
        raw = regression_coherence(rng.normal(size=(2, 3)), gamma=0.7).raw
        assert raw[0] == raw[1]
        classes = rng.integers(0, 2, size=2)
        raw = classification_coherence(classes).raw
        assert raw[0] == raw[1]


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    for _ in range(100):
        predictions = rng.normal(size=(6, 2))
        perm = rng.permutation(6)
        base = regression_coherence(predictions, gamma=1.0).raw
        permuted = regression_coherence(predictions[perm], gamma=1.0).raw
        assert permuted == pytest.approx(base[perm], abs=1e-15)


def test_regression_monotone_in_distance():
    others = [[0.0, 0.0], [1.0, 0.0], [0.5, -0.5]]
    previous = None
    for height in np.linspace(0.0, 3.0, 30):
        raw = regression_coherence([[0.5, height]] + others, gamma=1.0).raw[0]
        if previous is not None:
            assert raw < previous
        previous = raw


def test_sampled_full_peer_set_equals_exact():
    rng = np.random.default_rng(6)
    for t in range(1, 200):
        m = int(rng.integers(2, 12))
        classes = rng.integers(0, 3, size=m)
        sampled = sampled_coherence(m - 1, rng_seed=17, t=t, predicted_classes=classes)
        assert sampled.raw.tolist() == classification_coherence(classes).raw.tolist()
        assert sampled.pairs_evaluated == m * (m - 1)

        predictions = rng.normal(size=(m, 2))
        sampled = sampled_coherence(m - 1, rng_seed=17, t=t, predictions=predictions, gamma=0.5)
        assert sampled.raw == pytest.approx(regression_coherence(predictions, gamma=0.5).raw, abs=1e-12)


def test_sampled_unanimous():
    report = sampled_coherence(5, rng_seed=1, t=3, predicted_classes=[7] * 100)
    assert report.raw.tolist() == [1.0] * 100
    assert report.pairs_evaluated == 500


def test_sampled_is_deterministic():
    classes = list(range(10)) * 3
    first = sampled_coherence(4, rng_seed=99, t=12, predicted_classes=classes).raw
    second = sampled_coherence(4, rng_seed=99, t=12, predicted_classes=classes).raw
    assert first.tolist() == second.tolist()


def test_sampled_k_out_of_range():
    with pytest.raises(ConfigurationError):
        sampled_coherence(0, rng_seed=0, t=1, predicted_classes=[0, 1, 2])
    with pytest.raises(ConfigurationError):
        sampled_coherence(3, rng_seed=0, t=1, predicted_classes=[0, 1, 2])


def test_sampled_unbiased():
    classes = [0, 0, 1, 2, 0, 1, 1, 0, 3, 0]
    exact = classification_coherence(classes).raw
    draws = np.array([
        sampled_coherence(3, rng_seed=seed, t=1, predicted_classes=classes).raw for seed in range(10_000)
    ])
    means = draws.mean(axis=0)
    errors = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert abs(means[0] - exact[0]) <= 3 * errors[0]
    # pooled over experts the estimator is unbiased as well
    assert abs(means.mean() - exact.mean()) <= 3 * draws.mean(axis=1).std(ddof=1) / math.sqrt(len(draws))


@pytest.mark.slow
def test_sampled_tracks_exact_after_smoothing():
    rng = np.random.default_rng(123)
    m, k, alpha_c = 50, 8, 0.85
    exact_smooth = np.full(m, 0.5)
    sampled_smooth = np.full(m, 0.5)
    deviations = []
    for t in range(1, 1001):
        classes = rng.integers(0, 10, size=m)
        exact_smooth = smooth_coherence(exact_smooth, classification_coherence(classes).raw, alpha_c)
        sampled = sampled_coherence(k, rng_seed=7, t=t, predicted_classes=classes).raw
        sampled_smooth = smooth_coherence(sampled_smooth, sampled, alpha_c)
        deviations.append(np.abs(sampled_smooth - exact_smooth).mean())
    assert np.mean(deviations) <= 0.05


def test_smoothing_examples():
    assert smooth_coherence([0.5], [0.5], 0.85).tolist() == [0.5]
    assert smooth_coherence([0.5], [1.0], 0.85)[0] == pytest.approx(0.575, abs=1e-12)
    assert smooth_coherence([1.0], [0.0], 0.85)[0] == pytest.approx(0.85, abs=1e-12)


def test_smoothing_stays_in_unit_interval():
    rng = np.random.default_rng(10)
    for _ in range(200):
        result = smooth_coherence(rng.uniform(size=5), rng.uniform(size=5), rng.uniform(0.01, 0.99))
        assert np.all((result >= 0.0) & (result <= 1.0))


@pytest.mark.timing
def test_sampled_cost_grows_linearly():
    def best_time(m):
        classes = np.arange(m) % 10
        timings = []
        for repeat in range(3):
            start = time.perf_counter()
            sampled_coherence(4, rng_seed=repeat, t=1, predicted_classes=classes)
            timings.append(time.perf_counter() - start)
        return min(timings)

    # linear cost gives a ratio near 4; quadratic would give 16
    assert best_time(2000) / best_time(500) < 8


@pytest.mark.timing
def test_exact_cost_grows_quadratically():
    def best_time(m):
        classes = np.arange(m) % 10
        timings = []
        for _ in range(3):
            start = time.perf_counter()
            classification_coherence(classes)
            timings.append(time.perf_counter() - start)
        return min(timings)

    # tenfold more experts: quadratic gives ~100, linear ~10
    assert best_time(3000) / best_time(300) > 20
