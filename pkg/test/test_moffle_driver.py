import math

import numpy as np
import pytest

from errors import ConfigError, LevelMismatch
from function_spaces import FeatureMap
from generators import EnvParams, generate_env, generate_feature_class, generate_rewards
from mdp_core import MixturePolicy, Policy, exact_weighted_transitions, uniform_policy
from moffle_driver import (EnvironmentAccess, MoffleConfig, PolicyCover, exact_bellman_error, explore, moffle,
                           plan_downstream, solve_beta, verify_cover)
from planners import FqiVariant
from rep_learning import OracleMode, SearchBudget


def _config(**kwargs):
    params = dict(eta_min=0.1, dim=3, num_actions=2, horizon=3)
    params.update(kwargs)
    return MoffleConfig(**params)


def test_solve_beta_hits_the_constraint():
    beta = solve_beta(0.1, 3, 2, math.sqrt(3))
    rhs = 0.1 ** 2 / (128.0 * 3 * 2 ** 4 * 3.0)
    assert 0.0 < beta < 1.0
    assert beta * math.log1p(8.0 / beta) == pytest.approx(rhs, rel=1e-6)


def test_config_derivations():
    cfg = _config()
    assert cfg.bound == pytest.approx(math.sqrt(3))
    assert cfg.g_bound == pytest.approx(3 * math.sqrt(3))
    assert cfg.lag == 2 and cfg.append == 3
    assert cfg.ridge.lam == pytest.approx(1.0 / math.sqrt(3))
    assert cfg.downstream_variant == FqiVariant.FULL_CLASS
    assert cfg.kappa == pytest.approx(64.0 * 3 * 16 * math.log1p(8.0 / cfg.beta) / 0.1)
    assert cfg.epsilon_reg == pytest.approx(0.1 ** 3 / (9 * 2 ** 9 * math.log1p(8.0 / cfg.beta) ** 2))
    assert cfg.epsilon_apx == pytest.approx(0.01 / (16.0 * 81 * cfg.kappa * 2))


def test_simplex_mode_derivations():
    cfg = _config(simplex_mode=True, oracle=OracleMode.MINMAXMIN)
    assert cfg.action_power == 2
    assert cfg.lag == 1 and cfg.append == 2
    assert cfg.downstream_variant == FqiVariant.REPRESENTATION
    power = 0.1 ** 3 / (9 * 2 ** 5 * math.log1p(8.0 / cfg.beta) ** 2)
    assert cfg.epsilon_reg == pytest.approx(power)


def test_config_overrides():
    cfg = _config(beta_override=0.25, lag_override=0, n_plan=50000)
    assert cfg.beta == 0.25
    assert cfg.append == 1
    assert cfg.n_total == 50000
    with pytest.raises(ConfigError):
        _config(eta_min=0.0)


def test_from_settings(reference_env):
    cfg = MoffleConfig.from_settings({"oracle": "greedy", "eta_min": "", "lag": "1"}, reference_env)
    assert cfg.eta_min == reference_env.eta_min
    assert cfg.oracle == OracleMode.GREEDY
    assert cfg.lag == 1
    with pytest.raises(ConfigError):
        MoffleConfig.from_settings({"oracle": "magic"}, reference_env)
    with pytest.raises(ConfigError):
        MoffleConfig.from_settings({"discriminator_mode": "soft"}, reference_env)


def test_data_policy_offsets():
    cover = PolicyCover(policies=[], planned=[], append=3)
    first = cover.data_policy(0)
    assert first.last_level == -3
    assert first.extra == 3
    assert first.last_action == 0
    assert cover.lag == 2


def test_environment_access_caches_levels(reference_env):
    env = EnvironmentAccess(reference_env, seed=1)
    with pytest.raises(LevelMismatch):
        env.dataset(0, 10)
    policy = MixturePolicy.uniform_prefix(-3, 3)
    data = env.collect_level(0, policy, 200)
    assert env.collect_level(0, policy, 200) is data
    assert env.episodes == 200
    assert data.provenance["tag"] == "rho[-3]+3"
    assert env.dataset(0, 50) is env.dataset(0, 50)
    assert env.dataset(0, 50).size == 50


def test_single_level_explore_is_unplanned():
    mdp = generate_env(EnvParams(horizon=1, states=5, latents=2, eta_floor=0.0), 3)
    features = generate_feature_class(mdp, 1, ["simplex"], 3)
    cover = explore(EnvironmentAccess(mdp, seed=3, exact=True), features, _config(
        eta_min=mdp.eta_min, dim=2, horizon=1, exact_data=True, max_workers=1))
    assert cover.planned == [False]
    assert cover.policies[0].members[0].label == "uniform_0"
    assert not cover.incomplete


@pytest.mark.slow
def test_explore_plans_only_levels_with_room(reference_env, reference_features):
    cfg = _config(eta_min=reference_env.eta_min, exact_data=True, planner_max_iterations=2, max_workers=1)
    cover = explore(EnvironmentAccess(reference_env, seed=7, exact=True), reference_features, cfg)
    assert cover.planned == [True, False, False]
    assert [r["data_policy_offset"] for r in cover.reports] == [[-3, 3], [-2, 3], [-1, 3]]
    assert cover.gammas[0].shape == (3, 3)
    restored = PolicyCover.from_dict(cover.to_dict())
    assert restored.planned == cover.planned
    assert restored.policies[0].last_level == 0


def test_verify_cover_flags_deterministic_cover(branching_env):
    always_left = Policy.deterministic([[0]], 2, label="left")
    cover = PolicyCover(policies=[MixturePolicy.of(always_left), MixturePolicy.of(uniform_policy(branching_env))],
                        planned=[False, False], append=1)
    cfg = _config(eta_min=0.5, dim=2, horizon=2)
    report = verify_cover(branching_env, cover, cfg)
    assert not report.ok
    level1 = report.levels[1]
    assert level1["kappa_emp_k"] == math.inf
    assert sorted(level1["uncovered"]) == [[1, 0], [1, 1]]
    assert not level1["latent_ok"]


def test_verify_cover_accepts_uniform_cover(branching_env):
    cover = PolicyCover(policies=[MixturePolicy.of(uniform_policy(branching_env, last_level=0)),
                                  MixturePolicy.of(uniform_policy(branching_env))],
                        planned=[False, False], append=1)
    report = verify_cover(branching_env, cover, _config(eta_min=0.5, dim=2, horizon=2))
    assert report.ok
    assert all(entry["kappa_ok"] for entry in report.levels)


def test_exact_bellman_error(reference_env, reference_features):
    policy = uniform_policy(reference_env)
    values = np.linspace(0.0, 1.0, reference_env.num_states(1))
    star_error = exact_bellman_error(reference_env, policy, reference_features.star(0), values, math.sqrt(3))
    zero = FeatureMap(0, np.zeros_like(reference_env.phi_star(0)))
    assert star_error == pytest.approx(0.0, abs=1e-9)
    assert exact_bellman_error(reference_env, policy, zero, values, math.sqrt(3)) > 1e-3


def test_plan_downstream_full_class_is_optimal(reference_env, reference_features, reference_rewards):
    policy = uniform_policy(reference_env)
    datasets = [exact_weighted_transitions(reference_env, policy, h) for h in range(reference_env.horizon)]
    result = plan_downstream(datasets, reference_features, reference_rewards[0], FqiVariant.FULL_CLASS,
                             mdp=reference_env)
    assert result.gap == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        plan_downstream(datasets, reference_features, reference_rewards[0], FqiVariant.REPRESENTATION)


@pytest.mark.slow
def test_moffle_exact_pipeline(small_env):
    features = generate_feature_class(small_env, 2, ["permutation", "simplex"], 11)
    rewards = generate_rewards(small_env, 2, 11)
    cfg = _config(eta_min=max(small_env.eta_min, 0.05), dim=small_env.dim, horizon=small_env.horizon,
                  exact_data=True, planner_max_iterations=2, max_workers=1,
                  search=SearchBudget(restarts=4, steps=20, seed=11))
    env = EnvironmentAccess(small_env, seed=11, exact=True)
    result = moffle(env, features, rewards, cfg)
    assert len(result.features) == small_env.horizon
    assert result.episodes == 0
    for reward in rewards:
        downstream = plan_downstream(result.datasets, features, reward, cfg.downstream_variant,
                                     phi_bar=result.features, mdp=small_env)
        assert downstream.gap <= 0.15 * small_env.horizon


def test_derived_planner_budget_is_rejected(reference_env, reference_features):
    cfg = _config(eta_min=0.05)
    assert cfg.beta < 1e-5
    assert cfg.planner_cap > 10 ** 6
    with pytest.raises(ConfigError):
        cfg.check_planner_budget()
    with pytest.raises(ConfigError):
        explore(EnvironmentAccess(reference_env, seed=7, exact=True), reference_features, cfg)

    _config(eta_min=0.05, beta_override=0.4).check_planner_budget()
    _config(eta_min=0.05, planner_max_iterations=3).check_planner_budget()
    assert _config(eta_min=0.05, planner_max_iterations=3).planner_cap == 3


@pytest.mark.slow
def test_sampled_explore_covers_reference_env(reference_env, reference_features):
    cfg = _config(eta_min=reference_env.eta_min, beta_override=0.4, max_workers=1,
                  search=SearchBudget(restarts=16, steps=50, seed=7))
    env = EnvironmentAccess(reference_env, seed=7)
    cover = explore(env, reference_features, cfg)
    assert cover.planned == [True, False, False]
    assert not cover.incomplete
    assert len(cover.traces[0]) <= cfg.planner_cap
    assert env.episodes > 0
    report = verify_cover(reference_env, cover, cfg)
    assert report.ok, report.levels
