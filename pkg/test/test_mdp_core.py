import itertools

import numpy as np
import pytest

from errors import LevelMismatch, NonStochasticRow, PolicyHorizonMismatch, ShapeMismatch
from mdp_core import (LatentLowRankMDP, MixturePolicy, Policy, TransitionDataset, build_from_latent,
                      collect_dataset, exact_bellman_backup, exact_latent_occupancy, exact_policy_value,
                      exact_state_action_occupancy, exact_weighted_transitions, make_stream,
                      sample_episode, uniform_policy, value_iteration)


def test_single_successor_level():
    mdp = build_from_latent([np.ones((1, 1, 1))], [np.ones((1, 1))], np.ones(1), horizon=1, num_actions=1)
    assert mdp.transitions[0][0, 0, 0] == 1.0
    assert mdp.eta_min == 1.0


def test_uniform_mixing_gives_even_split():
    psi = np.full((1, 1, 2), 0.5)
    mdp = build_from_latent([psi], [np.eye(2)], np.ones(1), horizon=1, num_actions=1)
    np.testing.assert_allclose(mdp.transitions[0][0, 0], [0.5, 0.5])
    assert mdp.eta_min == pytest.approx(0.5)


def test_transitions_match_double_loop(random_latent):
    psi, nu, init = random_latent
    mdp = build_from_latent([psi], [nu], init, horizon=1, num_actions=2)
    expected = np.zeros((4, 2, 5))
    for x, a, y in itertools.product(range(4), range(2), range(5)):
        expected[x, a, y] = sum(psi[x, a, z] * nu[z, y] for z in range(3))
    np.testing.assert_allclose(mdp.transitions[0], expected, atol=1e-15)
    np.testing.assert_allclose(mdp.transitions[0].sum(axis=2), 1.0, atol=1e-12)


def test_rejects_non_stochastic_rows(random_latent):
    psi, nu, init = random_latent
    bad = psi.copy()
    bad[0, 0] *= 0.9
    with pytest.raises(NonStochasticRow):
        build_from_latent([bad], [nu], init, horizon=1, num_actions=2)
    with pytest.raises(ShapeMismatch):
        build_from_latent([psi], [nu[:2]], init, horizon=1, num_actions=2)


def test_feature_norm_conditions(reference_env):
    rng = make_stream(0, "norms")
    for h in range(reference_env.horizon):
        assert np.linalg.norm(reference_env.phi_star(h), axis=2).max() <= 1.0 + 1e-12
        g = rng.random((100, reference_env.num_states(h + 1)))
        assert np.linalg.norm(g @ reference_env.mu_star(h), axis=1).max() <= np.sqrt(reference_env.dim) + 1e-12


def test_bellman_backup_is_linear_in_phi_star(reference_env):
    rng = make_stream(1, "backup")
    for h in range(reference_env.horizon):
        for _ in range(100):
            f = rng.random(reference_env.num_states(h + 1))
            backup = exact_bellman_backup(reference_env, h, f)
            np.testing.assert_allclose(backup.values, reference_env.phi_star(h) @ backup.theta, atol=1e-10)
            assert np.linalg.norm(backup.theta) <= np.sqrt(reference_env.dim) + 1e-12


def test_sample_episode_is_deterministic(reference_env):
    policy = uniform_policy(reference_env)
    first = sample_episode(reference_env, policy, make_stream(3, "episode"))
    second = sample_episode(reference_env, policy, make_stream(3, "episode"))
    assert first == second
    assert len(first.states) == reference_env.horizon + 1
    assert len(first.actions) == reference_env.horizon


def test_sample_episode_requires_full_policy(reference_env):
    short = uniform_policy(reference_env, last_level=0)
    with pytest.raises(PolicyHorizonMismatch):
        sample_episode(reference_env, short, make_stream(0, "short"))


def test_negative_offset_mixture_is_uniform(reference_env):
    prefix = MixturePolicy.uniform_prefix(-3, 3)
    assert prefix.last_action == 0
    np.testing.assert_allclose(exact_state_action_occupancy(reference_env, prefix, 0),
                               exact_state_action_occupancy(reference_env, uniform_policy(reference_env), 0))


def test_collected_frequencies_match_occupancy(reference_env):
    policy = uniform_policy(reference_env)
    data = collect_dataset(reference_env, policy, 1, 20000, make_stream(2, "collect"))
    assert data.size == 20000
    assert data.provenance["level"] == 1
    data.validate(reference_env)
    counts = np.zeros((reference_env.num_states(1), reference_env.num_actions))
    np.add.at(counts, (data.states, data.actions), 1.0)
    exact = exact_state_action_occupancy(reference_env, policy, 1)
    np.testing.assert_allclose(counts / data.size, exact, atol=0.02)


def test_weighted_view_and_head(reference_env):
    data = collect_dataset(reference_env, uniform_policy(reference_env), 0, 500, make_stream(4, "head"))
    assert data.weighted.weights.sum() == pytest.approx(1.0)
    assert data.weighted.num_samples == 500
    head = data.head(100)
    assert head.size == 100
    assert head.provenance["slice"] == 100
    np.testing.assert_array_equal(head.states, data.states[:100])


def test_exact_weighted_transitions_sum_to_one(reference_env):
    data = exact_weighted_transitions(reference_env, uniform_policy(reference_env), 2)
    assert data.weights.sum() == pytest.approx(1.0)
    assert data.num_samples is None


def test_latent_occupancy(reference_env):
    occ = exact_latent_occupancy(reference_env, uniform_policy(reference_env), 1)
    assert occ.shape == (reference_env.dim,)
    assert occ.sum() == pytest.approx(1.0)
    with pytest.raises(LevelMismatch):
        exact_latent_occupancy(reference_env, uniform_policy(reference_env), 0)


def test_eta_min_is_reachable_minimum(reference_env):
    assert reference_env.eta_min >= 0.05


def test_value_iteration_matches_policy_enumeration(small_env):
    rng = make_stream(6, "vi")
    tables = [rng.random((small_env.num_states(h), small_env.num_actions)) for h in range(small_env.horizon)]
    result = value_iteration(small_env, tables)
    per_level = [list(itertools.product(range(small_env.num_actions), repeat=small_env.num_states(h)))
                 for h in range(small_env.horizon)]
    best = max(exact_policy_value(small_env, Policy.deterministic(list(choice), small_env.num_actions), tables)
               for choice in itertools.product(*per_level))
    assert result.value == pytest.approx(best, abs=1e-12)
    assert exact_policy_value(small_env, result.policy, tables) == pytest.approx(result.value, abs=1e-12)


def test_zero_reward_has_zero_value(reference_env):
    zeros = [np.zeros((reference_env.num_states(h), reference_env.num_actions))
             for h in range(reference_env.horizon)]
    assert value_iteration(reference_env, zeros).value == 0.0
    assert exact_policy_value(reference_env, uniform_policy(reference_env), zeros) == 0.0


def test_env_round_trip_is_bit_identical(reference_env):
    restored = LatentLowRankMDP.from_dict(reference_env.to_dict())
    for h in range(reference_env.horizon):
        np.testing.assert_array_equal(restored.transitions[h], reference_env.transitions[h])
        np.testing.assert_array_equal(restored.psi[h], reference_env.psi[h])
    assert restored.eta_min == reference_env.eta_min


def test_dataset_rejects_ragged_columns():
    with pytest.raises(ShapeMismatch):
        TransitionDataset(0, np.zeros(3), np.zeros(2), np.zeros(3))


def test_appended_uniform_steps_push_occupancy_forward(reference_env):
    rng = make_stream(9, "pushforward")
    members = tuple(Policy((rng.dirichlet(np.ones(reference_env.num_actions), size=reference_env.num_states(0)),),
                           label=f"member_{k}") for k in range(2))
    base = MixturePolicy(members, 0, 0, label="rho_0")
    sa = exact_state_action_occupancy(reference_env, base, 0)
    for extra in range(1, reference_env.horizon):
        dist = np.einsum("xa,xay->y", sa, reference_env.transitions[extra - 1])
        sa = dist[:, None] * np.full(reference_env.num_actions, 1.0 / reference_env.num_actions)
        np.testing.assert_allclose(exact_state_action_occupancy(reference_env, base.with_extra(extra), extra),
                                   sa, rtol=0, atol=1e-12)
