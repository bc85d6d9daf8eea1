import numpy as np
import pytest

from earcp_lab.core.errors import IngestionError
from earcp_lab.models.schemas import AggregatorSpec, ScenarioSpec, TaskMode
from earcp_lab.services.factory import build_aggregator
from earcp_lab.services.ingest import ingest_csv, write_stream_csv
from earcp_lab.services.simulator import default_loss, drive_stream, scenario_steps

GOOD = """step,expert_id,p_0,p_1
1,0,0.9,0.1
1,1,0.2,0.8
1,target,1,0
2,1,0.5,0.5
2,target,0,1
2,0,0.6,0.4
3,0,1,0
3,1,0,1
3,target,0,1
"""


def write(tmp_path, text, name="stream.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_reads_hand_written_stream(tmp_path):
    steps = list(ingest_csv(write(tmp_path, GOOD), TaskMode.CLASSIFICATION, m=2))
    assert [step for step, _, _ in steps] == [1, 2, 3]
    _, predictions, target = steps[1]
    assert predictions.tolist() == [[0.6, 0.4], [0.5, 0.5]]
    assert target.tolist() == [0.0, 1.0]


def test_declared_dimension_must_match(tmp_path):
    with pytest.raises(IngestionError) as excinfo:
        list(ingest_csv(write(tmp_path, GOOD), TaskMode.CLASSIFICATION, m=2, d=3))
    assert excinfo.value.line == 1


def test_decreasing_step_reports_line(tmp_path):
    text = GOOD.replace("3,0,1,0", "1,0,1,0")
    with pytest.raises(IngestionError) as excinfo:
        list(ingest_csv(write(tmp_path, text), TaskMode.CLASSIFICATION, m=2))
    assert excinfo.value.line == 8
    assert "line 8" in str(excinfo.value)


@pytest.mark.parametrize("bad", ["nan", "inf", "abc"])
def test_non_finite_values(tmp_path, bad):
    text = GOOD.replace("2,1,0.5,0.5", f"2,1,{bad},0.5")
    with pytest.raises(IngestionError) as excinfo:
        list(ingest_csv(write(tmp_path, text), TaskMode.REGRESSION, m=2))
    assert excinfo.value.line == 5


def test_simplex_violation(tmp_path):
    text = GOOD.replace("1,1,0.2,0.8", "1,1,0.2,0.9")
    with pytest.raises(IngestionError) as excinfo:
        list(ingest_csv(write(tmp_path, text), TaskMode.CLASSIFICATION, m=2))
    assert excinfo.value.line == 3
    # regression streams carry arbitrary vectors
    assert len(list(ingest_csv(write(tmp_path, text), TaskMode.REGRESSION, m=2))) == 3


def test_short_row(tmp_path):
    text = GOOD.replace("2,target,0,1", "2,target,0")
    with pytest.raises(IngestionError) as excinfo:
        list(ingest_csv(write(tmp_path, text), TaskMode.CLASSIFICATION, m=2))
    assert excinfo.value.line == 6


def test_long_row(tmp_path):
    text = GOOD.replace("2,target,0,1", "2,target,0,1,0")
    with pytest.raises(IngestionError):
        list(ingest_csv(write(tmp_path, text), TaskMode.CLASSIFICATION, m=2))


def test_bad_header(tmp_path):
    with pytest.raises(IngestionError):
        list(ingest_csv(write(tmp_path, GOOD.replace("expert_id", "expert")), TaskMode.CLASSIFICATION, m=2))


@pytest.mark.parametrize("old, new", [
    ("3,target,0,1", "3,1,0,1"),
    ("2,0,0.6,0.4", "2,1,0.6,0.4"),
    ("1,1,0.2,0.8", "1,2,0.2,0.8"),
])
def test_rows_per_step(tmp_path, old, new):
    with pytest.raises(IngestionError):
        list(ingest_csv(write(tmp_path, GOOD.replace(old, new)), TaskMode.CLASSIFICATION, m=2))


def test_missing_file(tmp_path):
    with pytest.raises(IngestionError):
        list(ingest_csv(tmp_path / "absent.csv", TaskMode.CLASSIFICATION, m=2))


@pytest.mark.parametrize("mode", ["classification", "regression"])
def test_exported_stream_replays_identically(tmp_path, mode):
    spec = ScenarioSpec.model_validate({
        "mode": mode, "m": 4, "d": 3, "horizon": 200, "seed": 11,
        "experts": [{"behavior": "accurate", "noise": 0.3}, {"behavior": "random_guess"},
                    {"behavior": "collusive_wrong"}, {"behavior": "collusive_wrong", "agree_prob": 0.5}],
    })
    path = write_stream_csv(tmp_path / "stream.csv", scenario_steps(spec))
    aggregator_spec = AggregatorSpec(name="earcp", kind="earcp")

    def trajectory(steps):
        aggregator = build_aggregator(aggregator_spec, spec.m, spec.mode, default_loss(spec), seed=spec.seed)
        return drive_stream(aggregator, steps)

    direct = trajectory(scenario_steps(spec))
    replayed = trajectory(ingest_csv(path, spec.mode, spec.m, spec.d))
    assert len(direct) == len(replayed) == 200
    for a, b in zip(direct, replayed):
        assert a.ensemble_loss == b.ensemble_loss
        assert np.array_equal(a.weights, b.weights)


@pytest.mark.parametrize("chunk_rows", [1, 2, 4])
def test_steps_spanning_chunks(tmp_path, chunk_rows):
    path = write(tmp_path, GOOD)
    whole = list(ingest_csv(path, TaskMode.CLASSIFICATION, m=2))
    chunked = list(ingest_csv(path, TaskMode.CLASSIFICATION, m=2, chunk_rows=chunk_rows))
    assert [step for step, _, _ in chunked] == [1, 2, 3]
    for (_, p1, y1), (_, p2, y2) in zip(whole, chunked):
        assert np.array_equal(p1, p2) and np.array_equal(y1, y2)


def test_line_numbers_count_across_chunks(tmp_path):
    text = GOOD.replace("3,0,1,0", "1,0,1,0")
    with pytest.raises(IngestionError) as excinfo:
        list(ingest_csv(write(tmp_path, text), TaskMode.CLASSIFICATION, m=2, chunk_rows=3))
    assert excinfo.value.line == 8


def test_steps_are_yielded_before_a_later_error(tmp_path):
    text = GOOD.replace("3,1,0,1", "3,1,0,2")
    steps = ingest_csv(write(tmp_path, text), TaskMode.CLASSIFICATION, m=2, chunk_rows=2)
    assert next(steps)[0] == 1
    assert next(steps)[0] == 2
    with pytest.raises(IngestionError) as excinfo:
        next(steps)
    assert excinfo.value.line == 9


def test_ingestion_errors_are_logged(tmp_path, caplog):
    with caplog.at_level("ERROR", logger="earcp_lab.services.ingest"):
        with pytest.raises(IngestionError):
            list(ingest_csv(tmp_path / "absent.csv", TaskMode.CLASSIFICATION, m=2))
    assert any("Failed to ingest stream" in record.getMessage() for record in caplog.records)
