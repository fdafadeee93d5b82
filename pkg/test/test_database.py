import pytest

from database import RunStore


@pytest.fixture
def store(tmp_path):
    return RunStore(str(tmp_path / "ledger" / "runs.db"))


def test_create_and_refresh_run(store):
    row_id, is_new = store.get_or_create_run("seed7", "/tmp/out", 7, {"oracle": "eigen"})
    assert is_new
    again, is_new = store.get_or_create_run("seed7", "/tmp/out", 7, {"oracle": "greedy"})
    assert again == row_id
    assert not is_new
    assert store.get_run("seed7")["config"] == {"oracle": "greedy"}


def test_stages_keep_order(store):
    store.get_or_create_run("r", "/tmp/r", 1)
    store.add_stage("r", "generate", "ok", metadata={"wall_clock": 0.1})
    store.add_stage("r", "explore", "failed", message="boom")
    stages = store.get_run_stages("r")
    assert [s["stage"] for s in stages] == ["generate", "explore"]
    assert stages[0]["metadata"] == {"wall_clock": 0.1}
    assert stages[1]["message"] == "boom"
    assert stages[1]["metadata"] == {}


def test_metrics_are_replaced(store):
    store.get_or_create_run("r", "/tmp/r", 1)
    store.record_metrics("r", {"gap_0": 0.5, "value_0": 1.0})
    store.record_metrics("r", {"gap_0": 0.25})
    assert store.get_run("r")["metrics"] == {"gap_0": 0.25, "value_0": 1.0}


def test_missing_run_and_listing(store):
    assert store.get_run("nope") is None
    for i in range(3):
        store.get_or_create_run(f"r{i}", "/tmp", i)
    runs = store.list_runs(limit=2)
    assert len(runs) == 2
    assert {r["run_id"] for r in store.list_runs()} == {"r0", "r1", "r2"}
