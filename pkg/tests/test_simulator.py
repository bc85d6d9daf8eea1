import numpy as np
import pytest

from earcp_lab.core.errors import ContractError
from earcp_lab.models.schemas import AggregatorSpec, ScenarioSpec, ZeroOneArgmax
from earcp_lab.services.losses import evaluate_losses
from earcp_lab.services.metrics import run_metrics
from earcp_lab.services.simulator import behavior_at, generate_step, run_scenario, scenario_steps

EARCP = AggregatorSpec(name="earcp", kind="earcp")


def scenario(experts, **overrides):
    payload = {"mode": "classification", "m": len(experts), "d": 5, "horizon": 500, "experts": experts}
    payload.update(overrides)
    return ScenarioSpec.model_validate(payload)


def accurate(noise=0.0):
    return {"behavior": "accurate", "noise": noise}


GUESS = {"behavior": "random_guess"}
COLLUDER = {"behavior": "collusive_wrong", "group_id": 0, "agree_prob": 1.0}


def test_noiseless_accurate_expert_never_errs():
    spec = scenario([accurate(), GUESS, GUESS])
    for _, predictions, target in scenario_steps(spec):
        assert evaluate_losses(ZeroOneArgmax(), predictions, target)[0] == 0.0
        assert np.all(predictions >= 0.0)
        assert np.allclose(predictions.sum(axis=1), 1.0)


def test_noisy_accurate_predictions_stay_on_simplex():
    spec = scenario([accurate(0.4), accurate(1.0)], horizon=200)
    for _, predictions, _ in scenario_steps(spec):
        assert np.all(predictions >= 0.0)
        assert np.max(np.abs(predictions.sum(axis=1) - 1.0)) <= 1e-12


def test_collusive_clique_agrees_on_a_wrong_class():
    spec = scenario([COLLUDER, COLLUDER, COLLUDER, accurate()], horizon=300)
    for _, predictions, target in scenario_steps(spec):
        clique = predictions[:3].argmax(axis=1)
        assert len(set(clique.tolist())) == 1
        assert clique[0] != target.argmax()


def test_random_guess_error_rate():
    spec = scenario([GUESS, GUESS], d=10, horizon=10_000)
    losses = [evaluate_losses(ZeroOneArgmax(), predictions, target)[0]
              for _, predictions, target in scenario_steps(spec)]
    assert 0.88 <= np.mean(losses) <= 0.92


@pytest.mark.parametrize("mode", ["classification", "regression"])
def test_generation_is_a_pure_function_of_seed_and_step(mode):
    spec = scenario([accurate(0.2), GUESS, COLLUDER, COLLUDER], mode=mode, d=3, seed=2024, horizon=50)
    first = list(scenario_steps(spec))
    second = list(scenario_steps(spec))
    for (t, p1, y1), (_, p2, y2) in zip(first, second):
        assert np.array_equal(p1, p2) and np.array_equal(y1, y2)
        p3, y3 = generate_step(spec, t)
        assert np.array_equal(p1, p3) and np.array_equal(y1, y3)


def test_different_seeds_give_different_streams():
    first = np.array([p for _, p, _ in scenario_steps(scenario([GUESS, GUESS], seed=1, horizon=20))])
    second = np.array([p for _, p, _ in scenario_steps(scenario([GUESS, GUESS], seed=2, horizon=20))])
    assert first.shape == second.shape == (20, 2, 5)
    assert not np.array_equal(first, second)


def test_regression_target_in_box():
    spec = scenario([accurate(0.0), GUESS], mode="regression", d=4, horizon=300)
    for _, predictions, target in scenario_steps(spec):
        assert np.all(np.abs(target) <= 1.0)
        assert np.array_equal(predictions[0], target)
        assert np.all(np.abs(predictions[1]) <= 1.0)


def test_step_out_of_range():
    spec = scenario([GUESS, GUESS], horizon=10)
    with pytest.raises(ContractError):
        generate_step(spec, 0)
    with pytest.raises(ContractError):
        generate_step(spec, 11)


def test_behaviors_rotate_at_change_points():
    spec = scenario([accurate(), GUESS, COLLUDER], change_points=[100, 200])
    assert [behavior_at(spec, 99, i).behavior for i in range(3)] == ["accurate", "random_guess", "collusive_wrong"]
    assert [behavior_at(spec, 100, i).behavior for i in range(3)] == ["collusive_wrong", "accurate", "random_guess"]
    assert [behavior_at(spec, 200, i).behavior for i in range(3)] == ["random_guess", "collusive_wrong", "accurate"]


def test_uniform_weights_stay_uniform():
    records = run_scenario(scenario([accurate(), GUESS, GUESS, GUESS]), AggregatorSpec(name="u", kind="uniform"))
    assert len(records) == 500
    assert records[-1].weights.tolist() == [0.25] * 4


def test_single_accurate_expert_takes_the_lead():
    spec = scenario([GUESS, GUESS, accurate(0.1), GUESS, GUESS], horizon=2000, seed=5)
    records = run_scenario(spec, EARCP)
    assert int(np.argmax(records[-1].weights)) == 2


@pytest.mark.slow
def test_regime_switch_is_tracked():
    experts = [accurate()] + [GUESS] * 7
    for seed in range(20):
        spec = scenario(experts, m=8, horizon=2000, change_points=[1000], seed=seed)
        records = run_scenario(spec, EARCP)
        assert int(np.argmax(records[998].weights)) == 0
        uniform = run_scenario(spec, AggregatorSpec(name="u", kind="uniform"))
        assert run_metrics(records).cumulative_loss < run_metrics(uniform).cumulative_loss
        leaders = [int(np.argmax(record.weights)) for record in records[999:]]
        assert 1 in leaders[:300]
        switch = leaders.index(1)
        assert all(leader == 1 for leader in leaders[switch + 50:])


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_coherence_alone_follows_the_clique(seed):
    spec = scenario([COLLUDER] * 4 + [accurate(0.1)] * 2, horizon=1000, seed=seed)
    balanced = run_scenario(spec, AggregatorSpec(name="b", kind="earcp", earcp={"beta": 0.7}))
    coherence_only = run_scenario(spec, AggregatorSpec(name="c", kind="earcp", earcp={"beta": 0.0}))
    assert run_metrics(balanced).cumulative_loss < run_metrics(coherence_only).cumulative_loss


@pytest.mark.parametrize("kind", ["earcp", "hedge"])
def test_delayed_feedback_changes_nothing_but_timing(kind):
    traces = []
    for delay in (0, 5, 50):
        spec = scenario([accurate(0.3), GUESS, COLLUDER, COLLUDER], horizon=400, delay=delay, seed=8)
        traces.append(run_scenario(spec, AggregatorSpec(name="x", kind=kind)))
    reference = traces[0]
    for trace in traces[1:]:
        assert [r.step for r in trace] == [r.step for r in reference]
        for delayed, immediate in zip(trace, reference):
            assert np.array_equal(delayed.per_expert_loss, immediate.per_expert_loss)
            assert np.array_equal(delayed.weights, immediate.weights)
