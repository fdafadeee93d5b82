import csv
import json

import numpy as np
import pytest

from mdp_core import MixturePolicy, collect_dataset, exact_weighted_transitions, make_stream, uniform_policy
from moffle_driver import PolicyCover
from storage import RunDirectory, format_float, load_reward_file


@pytest.fixture
def run_dir(tmp_path):
    return RunDirectory(str(tmp_path / "run"))


def test_format_float():
    assert format_float(True) == "1"
    assert format_float(np.bool_(False)) == "0"
    assert format_float(np.int64(3)) == "3"
    assert float(format_float(0.1)) == 0.1
    assert format_float(float("inf")) == "inf"


def test_env_round_trip(run_dir, reference_env):
    run_dir.save_env(reference_env)
    restored = run_dir.load_env()
    assert restored.state_counts == reference_env.state_counts
    for h in range(reference_env.horizon):
        np.testing.assert_array_equal(restored.transitions[h], reference_env.transitions[h])


def test_feature_class_round_trip(run_dir, reference_features):
    run_dir.save_features(reference_features)
    assert run_dir.exists("features", "level_0_0.json")
    restored = run_dir.load_features()
    assert restored.star_index == reference_features.star_index
    assert restored.terminal_states == reference_features.terminal_states
    for h in range(reference_features.horizon):
        assert [f.label for f in restored.at(h)] == [f.label for f in reference_features.at(h)]
        np.testing.assert_array_equal(restored.at(h)[1].table, reference_features.at(h)[1].table)


def test_learned_and_rewards_round_trip(run_dir, reference_features, reference_rewards):
    stars = [reference_features.star(h) for h in range(reference_features.horizon)]
    run_dir.save_learned(stars)
    assert [f.label for f in run_dir.load_learned()] == [f.label for f in stars]
    run_dir.save_rewards(reference_rewards)
    restored = run_dir.load_rewards()
    np.testing.assert_array_equal(restored[2].tables[1], reference_rewards[2].tables[1])
    single = load_reward_file(run_dir.path("rewards.json"), index=1)
    assert single.label == "reward_1"


def test_sampled_datasets_round_trip(run_dir, reference_env):
    data = collect_dataset(reference_env, uniform_policy(reference_env), 1, 40, make_stream(0, "io"), tag="rho[-2]+3")
    run_dir.save_datasets([data])
    with open(run_dir.path("datasets", "level_1.csv"), newline="", encoding="utf-8") as f:
        header = next(csv.reader(f))
    assert header == ["level", "x", "a", "x_next"]
    restored = run_dir.load_datasets()[0]
    np.testing.assert_array_equal(restored.states, data.states)
    np.testing.assert_array_equal(restored.next_states, data.next_states)
    assert restored.provenance["tag"] == "rho[-2]+3"


def test_weighted_datasets_keep_weights(run_dir, reference_env):
    data = exact_weighted_transitions(reference_env, uniform_policy(reference_env), 0)
    run_dir.save_datasets([data])
    restored = run_dir.load_datasets()[0]
    np.testing.assert_array_equal(restored.weights, data.weights)
    assert restored.provenance["exact"] is True


def test_policy_and_cover(run_dir, reference_env):
    policy = uniform_policy(reference_env)
    run_dir.save_policy(policy, "downstream_0")
    assert run_dir.load_policy("downstream_0").last_level == reference_env.horizon - 1
    cover = PolicyCover(policies=[MixturePolicy.of(policy)], planned=[False], append=3)
    run_dir.save_cover(cover.to_dict())
    assert PolicyCover.from_dict(run_dir.load_cover()).append == 3


def test_metrics_are_sorted_and_exact(run_dir):
    run_dir.write_metrics({"b": 0.1, "a": True, "c": float("inf")})
    with open(run_dir.path("metrics.csv"), encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines[0] == "name,value"
    assert [line.split(",")[0] for line in lines[1:]] == ["a", "b", "c"]
    metrics = run_dir.read_metrics()
    assert metrics == {"a": 1.0, "b": 0.1, "c": float("inf")}


def test_trace_and_reports(run_dir):
    run_dir.write_trace([{"level": 0, "t": 1, "v_hat": 0.5, "trace_gamma": 3.5,
                          "lambda_min_gamma": 1.0, "floored": False}])
    with open(run_dir.path("planner_trace.csv"), encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[1] == ["0", "1", "0.5", "3.5", "1", "0"]
    run_dir.save_report("coverage", {"ok": True, "ratio": float("inf")})
    with open(run_dir.path("reports", "coverage.json"), encoding="utf-8") as f:
        assert json.load(f)["ok"] is True
    assert run_dir.load_report("coverage")["ratio"] == float("inf")
