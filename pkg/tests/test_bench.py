import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab import bench as bn
from flowlab.exceptions import ConfigError, DimensionMismatchError, OutOfRangeError
from flowlab.trainers import MultiHeadModel, TrainConfig

SMALL = bn.BenchmarkSpec(d=6, n_classes=3, n_train=300, n_test=300, hidden=8, pretrain=TrainConfig(learning_rate=0.5, epochs=60, batch_size=None))
FAST = dict(epochs=3, probe_epochs=20)


def test_generator_is_seeded_and_balanced():
    a = bn.gen_two_task_benchmark(SMALL)
    b = bn.gen_two_task_benchmark(SMALL)
    np.testing.assert_array_equal(a.train_b.features, b.train_b.features)
    assert np.bincount(a.train_a.labels).tolist() == [100, 100, 100]
    assert a.train_a.task == "A" and a.test_b.task == "B"
    c = bn.gen_two_task_benchmark(bn.BenchmarkSpec(**{**SMALL.__dict__, "seed": 1}))
    assert not np.array_equal(a.train_a.features, c.train_a.features)


def test_class_means_are_equally_separated():
    data = bn.gen_two_task_benchmark(SMALL)
    m = data.means_a
    dist = [np.linalg.norm(m[i] - m[j]) for i in range(3) for j in range(i + 1, 3)]
    np.testing.assert_allclose(dist, SMALL.separation)
    # the task-B means are a rigid motion of the task-A means
    mb = data.means_b
    dist_b = [np.linalg.norm(mb[i] - mb[j]) for i in range(3) for j in range(i + 1, 3)]
    np.testing.assert_allclose(dist_b, dist)


def test_rotation_is_orthogonal():
    R = bn._rotation(5, 0.7)
    np.testing.assert_allclose(R @ R.T, np.eye(5), atol=1e-15)


def test_spec_validation_and_round_trip():
    with pytest.raises(ConfigError, match="benchmark.noise"):
        bn.BenchmarkSpec.from_dict({"noise": 0.0})
    with pytest.raises(ConfigError, match="benchmark.colour: unknown key"):
        bn.BenchmarkSpec.from_dict({"colour": 1})
    spec = bn.BenchmarkSpec.from_dict(SMALL.to_dict())
    assert spec == SMALL
    assert spec.digest() == SMALL.digest()


def test_evaluate_and_hard_indices():
    m = MultiHeadModel({"W": np.eye(2), "b": np.zeros(2)}, {"B": {"W": np.eye(2), "b": np.zeros(2)}})
    from flowlab.trainers import LabeledDataset

    data = LabeledDataset(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), np.array([0, 0, 0]), "B")
    assert bn.evaluate(m, data) == pytest.approx(2 / 3)  # the tie in row 3 goes to class 0
    assert bn.hardest_indices([3.0, 1.0, 3.0, 0.0], 0.25).tolist() == [0]
    assert bn.hardest_indices([3.0, 1.0, 3.0, 0.0], 0.5).tolist() == [0, 2]
    with pytest.raises(OutOfRangeError):
        bn.hardest_indices([1.0], 0.0)
    with pytest.raises(DimensionMismatchError):
        bn.hard_sample_accuracy(m, data, [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=50), st.floats(0.01, 1.0))
def test_hardest_indices_properties(losses, fraction):
    idx = bn.hardest_indices(losses, fraction)
    k = math.ceil(fraction * len(losses) - 1e-9)
    assert len(idx) == k
    chosen = set(idx.tolist())
    rest = [losses[i] for i in range(len(losses)) if i not in chosen]
    if rest:
        assert min(losses[i] for i in chosen) >= max(rest)


@pytest.fixture(scope="module")
def small_run():
    methods = [
        TrainConfig(method="standard", **FAST),
        TrainConfig(method="flow", **FAST),
        TrainConfig(method="linear_probe", **FAST),
        TrainConfig(method="l2", l2_lambda=0.1, **FAST),
        TrainConfig(method="wise_ft", alpha=0.5, **FAST),
        TrainConfig(method="dro", **FAST),
    ]
    return bn.run_comparison(SMALL, methods, keep=True)


def test_report_has_one_row_per_method(small_run):
    rep = small_run.report
    assert [r.method for r in rep.ordered()] == ["standard", "flow", "linear_probe", "l2(0.1)", "wise_ft(0.5)", "dro"]
    assert rep["linear_probe"].delta_pre == 0.0
    assert rep["standard"].delta_target == 0.0
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(bn.REPORT_COLUMNS)
    assert len(lines) == 7
    obj = json.loads(rep.to_json())
    assert obj["rows"][1]["method"] == "flow"
    assert obj["metadata"]["spec_hash"] == SMALL.digest()


def test_report_average_is_two_way_mean(small_run):
    for row in small_run.report.ordered():
        assert row.average == pytest.approx((row.pretrain_acc + row.target_acc) / 2)


def test_comparison_is_reproducible(small_run):
    again = bn.run_comparison(SMALL, [TrainConfig(method="flow", **FAST)])
    assert again["flow"].as_dict() == small_run.report["flow"].as_dict() | {
        "delta_target": 0.0,
    }


def test_averaging_sweep_endpoints(small_run):
    run = small_run
    fine = run.results["standard"].combined()
    out = bn.averaging_sweep(run.pretrained, fine, [0.0, 1.0], run.data, run.test_losses)
    std = run.report["standard"]
    assert out[0][1].pretrain_acc == std.pretrain_acc
    pre_acc = bn.evaluate(run.pretrained, run.data.test_a, "A")
    assert out[1][1].pretrain_acc == pre_acc
    with pytest.raises(OutOfRangeError):
        bn.averaging_sweep(run.pretrained, fine, [2.0], run.data)


def test_tau_ablation_median_equals_p50(small_run):
    rep = bn.tau_ablation(SMALL, [50], TrainConfig(method="flow", **FAST))
    assert rep["p=50"].pretrain_acc == small_run.report["flow"].pretrain_acc
    assert rep["p=50"].target_acc == small_run.report["flow"].target_acc
    with pytest.raises(OutOfRangeError):
        bn.tau_ablation(SMALL, [100])


def test_duplicate_labels_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        bn.run_comparison(SMALL, [TrainConfig(), TrainConfig()])
    with pytest.raises(ConfigError):
        bn.run_comparison(SMALL, [])
