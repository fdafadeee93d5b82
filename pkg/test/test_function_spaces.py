import numpy as np
import pytest

from errors import CoordOutOfRange, EmptyClass, LevelMismatch, RewardOutOfRange, ShapeMismatch
from function_spaces import (Discriminator, DiscriminatorKind, FeatureClass, FeatureMap, QFunction,
                             RewardFunction, eval_discriminator, eval_targets, feature_design,
                             greedy_policy_from_q)
from mdp_core import TransitionDataset, exact_bellman_backup, make_stream


@pytest.fixture
def next_feature():
    table = np.array([
        [[1.0, 0.0], [0.0, 1.0]],
        [[0.6, 0.8], [0.0, 0.0]],
        [[0.0, 0.0], [0.0, 0.5]],
    ])
    return FeatureMap(1, table, label="next")


def test_feature_map_rejects_long_rows():
    with pytest.raises(ValueError):
        FeatureMap(0, np.full((2, 1, 2), 0.9))


def test_feature_map_round_trip(next_feature):
    restored = FeatureMap.from_dict(next_feature.to_dict())
    np.testing.assert_array_equal(restored.table, next_feature.table)
    assert restored.label == "next"


def test_feature_class_validation(next_feature):
    with pytest.raises(EmptyClass):
        FeatureClass(((),), 3)
    with pytest.raises(LevelMismatch):
        FeatureClass(((next_feature,),), 3)


def test_terminal_level_uses_one_hot(reference_features):
    terminal = reference_features.next_level(reference_features.horizon - 1)
    assert len(terminal) == 1
    np.testing.assert_array_equal(terminal[0].table[:, 0, :], np.eye(reference_features.terminal_states))
    assert terminal[0] is reference_features.next_level(reference_features.horizon - 1)[0]


def test_star_is_recorded(reference_env, reference_features):
    for h in range(reference_env.horizon):
        np.testing.assert_array_equal(reference_features.star(h).table, reference_env.phi_star(h))


def test_clipped_discriminator(next_feature):
    v = Discriminator(DiscriminatorKind.F_CLIPPED, next_feature, theta=np.array([1.0, -1.0]), bound=np.sqrt(2))
    # action means: (0.5, 0.5), (0.3, 0.4), (0, 0.25)
    np.testing.assert_allclose(v.values(), [0.0, 0.0, 0.0])
    v = Discriminator(DiscriminatorKind.F_CLIPPED, next_feature, theta=np.array([1.4, 0.0]), bound=np.sqrt(2))
    np.testing.assert_allclose(v.values(), [0.7, 0.42, 0.0])
    assert eval_discriminator(v, 1) == pytest.approx(0.42)


def test_unclipped_discriminator_can_be_negative(next_feature):
    v = Discriminator(DiscriminatorKind.F_UNCLIPPED, next_feature, theta=np.array([0.0, -1.4]), bound=np.sqrt(2))
    np.testing.assert_allclose(v.values(), [-0.7, -0.56, -0.35])


def test_g_class_uses_reward_and_max(next_feature):
    reward = np.array([[0.0, 1.0], [0.5, 0.0], [0.0, 0.0]])
    v = Discriminator(DiscriminatorKind.G_CLASS, next_feature, theta=np.array([0.0, 0.0]),
                      bound=2 * np.sqrt(2), reward=reward, clip_high=2.0)
    np.testing.assert_allclose(v.values(), [1.0, 0.5, 0.0])


def test_discriminator_bound_checks(next_feature):
    with pytest.raises(ValueError):
        Discriminator(DiscriminatorKind.F_CLIPPED, next_feature, theta=np.array([3.0, 0.0]), bound=np.sqrt(2))
    with pytest.raises(ShapeMismatch):
        Discriminator(DiscriminatorKind.F_CLIPPED, next_feature, theta=np.zeros(3), bound=np.sqrt(2))
    with pytest.raises(CoordOutOfRange):
        Discriminator(DiscriminatorKind.F_SIMPLEX_COORD, next_feature, coord=2)


def test_simplex_coordinate(next_feature):
    v = Discriminator(DiscriminatorKind.F_SIMPLEX_COORD, next_feature, coord=1)
    np.testing.assert_allclose(v.values(), [0.5, 0.4, 0.25])
    with pytest.raises(ShapeMismatch):
        eval_discriminator(v, 5)


def test_eval_targets_checks_level(next_feature):
    v = Discriminator(DiscriminatorKind.F_SIMPLEX_COORD, next_feature, coord=0)
    data = TransitionDataset(0, [0, 1], [0, 1], [2, 0])
    np.testing.assert_allclose(eval_targets(v, data), [0.0, 0.5])
    with pytest.raises(LevelMismatch):
        eval_targets(v, TransitionDataset(1, [0], [0], [0]))


def test_reward_range():
    with pytest.raises(RewardOutOfRange):
        RewardFunction((np.array([[1.5]]),))
    reward = RewardFunction.at_level([2, 3], 2, 1, np.ones((3, 2)))
    assert reward.horizon == 2
    assert reward.tables[0].sum() == 0.0


def test_q_function_clips(next_feature):
    q = QFunction(1, np.ones((3, 2)), next_feature, np.array([1.0, 1.0]), clip_high=1.5)
    assert q.values().max() <= 1.5
    assert q.raw_values().max() == pytest.approx(2.4)


def test_greedy_policy_breaks_ties_low():
    policy = greedy_policy_from_q([np.array([[1.0, 1.0], [0.0, 2.0]])])
    np.testing.assert_array_equal(policy.actions(0), [0, 1])
    assert policy.is_deterministic


def test_feature_design_is_cached(reference_features):
    data = TransitionDataset(0, [0, 1, 1], [0, 1, 1], [2, 3, 3]).weighted
    phi = reference_features.at(0)[0]
    assert feature_design(phi, data, 12) is feature_design(phi, data, 12)
    with pytest.raises(LevelMismatch):
        feature_design(reference_features.at(1)[0], data, 12)


def test_star_discriminator_realizes_uniform_backup(reference_env, reference_features):
    rng = make_stream(12, "realizable")
    star = reference_features.star(1)
    for _ in range(10):
        f = rng.random(reference_env.num_states(2))
        backup = exact_bellman_backup(reference_env, 1, f)
        disc = Discriminator(DiscriminatorKind.F_CLIPPED, star, theta=backup.theta, bound=np.sqrt(star.dim))
        expected = np.clip(backup.values.mean(axis=1), 0.0, 1.0)
        np.testing.assert_allclose(disc.values(), expected, rtol=0, atol=1e-12)
