import json

import pytest
from fastapi.testclient import TestClient

import main_api
from database import RunStore
from mdp_core import uniform_policy
from storage import RunDirectory


@pytest.fixture
def store(tmp_path, monkeypatch):
    store = RunStore(str(tmp_path / "api.db"))
    monkeypatch.setattr(main_api, "store", store)
    return store


@pytest.fixture
def client(store):
    return TestClient(main_api.app)


@pytest.fixture
def saved_run(tmp_path, reference_env, reference_rewards):
    run_dir = RunDirectory(str(tmp_path / "seed7"))
    run_dir.save_env(reference_env)
    run_dir.save_policy(uniform_policy(reference_env), "downstream_0")
    run_dir.save_rewards(reference_rewards)
    return run_dir


def test_health(client, store):
    response = client.get("/health")
    assert response.status_code == 200
    body = response.json()
    assert body["success"] is True
    assert body["data"]["database"] == store.db_path


def test_runs_listing_and_detail(client, store, saved_run):
    store.get_or_create_run("seed7", saved_run.root, 7, {"oracle": "eigen"})
    store.add_stage("seed7", "e2e", "ok")
    saved_run.save_json({"ok": True}, "report.json")

    runs = client.get("/runs", params={"limit": 5}).json()["data"]["runs"]
    assert [r["run_id"] for r in runs] == ["seed7"]

    detail = client.get("/runs/seed7").json()["data"]
    assert detail["config"] == {"oracle": "eigen"}
    assert detail["stages"][0]["stage"] == "e2e"
    assert detail["report"] == {"ok": True}


def test_unknown_run_is_404(client):
    response = client.get("/runs/missing")
    assert response.status_code == 404
    assert response.json()["success"] is False


def test_eval_with_reward(client, saved_run, reference_env, reference_rewards):
    response = client.post("/eval", json={
        "env_path": saved_run.path("env.json"),
        "policy_path": saved_run.path("policies", "downstream_0.json"),
        "reward_path": saved_run.path("rewards.json"),
    })
    assert response.status_code == 200
    data = response.json()["data"]
    assert data["gap"] >= -1e-9
    assert data["optimal"] == pytest.approx(data["value"] + data["gap"])


def test_eval_defaults_to_zero_reward(client, saved_run):
    response = client.post("/eval", json={
        "env_path": saved_run.path("env.json"),
        "policy_path": saved_run.path("policies", "downstream_0.json"),
    })
    assert response.json()["data"] == {"value": 0.0}


def test_eval_errors(client, saved_run, tmp_path):
    missing = client.post("/eval", json={"env_path": str(tmp_path / "nope.json"),
                                         "policy_path": saved_run.path("policies", "downstream_0.json")})
    assert missing.status_code == 404

    bad_env = tmp_path / "bad_env.json"
    bad_env.write_text(json.dumps({"H": 1, "K": 1, "psi": [[[[0.5]]]], "nu": [[[1.0]]], "init": [1.0]}),
                       encoding="utf-8")
    invalid = client.post("/eval", json={"env_path": str(bad_env),
                                         "policy_path": saved_run.path("policies", "downstream_0.json")})
    assert invalid.status_code == 400
    assert invalid.json()["success"] is False


def test_eval_rejects_malformed_files(client, saved_run, tmp_path):
    broken_env = tmp_path / "broken_env.json"
    broken_env.write_text("{not json", encoding="utf-8")
    response = client.post("/eval", json={"env_path": str(broken_env),
                                          "policy_path": saved_run.path("policies", "downstream_0.json")})
    assert response.status_code == 400
    assert response.json()["success"] is False

    wrong_policy = tmp_path / "wrong_policy.json"
    wrong_policy.write_text(json.dumps(["not", "a", "policy"]), encoding="utf-8")
    response = client.post("/eval", json={"env_path": saved_run.path("env.json"),
                                          "policy_path": str(wrong_policy)})
    assert response.status_code == 400
    assert response.json()["success"] is False
