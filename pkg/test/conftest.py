import numpy as np
import pytest

from generators import DECOY_KINDS, EnvParams, generate_env, generate_feature_class, generate_rewards
from mdp_core import build_from_latent, make_stream


@pytest.fixture(scope="session")
def reference_env():
    """H=3, K=2, d=3, |X_h|=12, η_min ≥ 0.05"""
    return generate_env(EnvParams(), 7)


@pytest.fixture(scope="session")
def reference_features(reference_env):
    return generate_feature_class(reference_env, 3, DECOY_KINDS, 7)


@pytest.fixture(scope="session")
def reference_rewards(reference_env):
    return generate_rewards(reference_env, 3, 7)


@pytest.fixture(scope="session")
def small_env():
    return generate_env(EnvParams(horizon=2, actions=2, states=4, latents=2, eta_floor=0.0), 11)


@pytest.fixture
def random_latent():
    """一层随机潜变量表 (ψ, ν, init)"""
    rng = make_stream(5, "fixture")
    psi = rng.dirichlet(np.ones(3), size=(4, 2))
    nu = rng.dirichlet(np.ones(5), size=3)
    init = np.full(4, 0.25)
    return psi, nu, init


@pytest.fixture
def branching_env():
    """第 0 层动作决定性地选择潜变量，用于构造覆盖不足的策略"""
    psi0 = np.zeros((1, 2, 2))
    psi0[0, 0, 0] = 1.0
    psi0[0, 1, 1] = 1.0
    nu0 = np.eye(2)
    psi1 = np.full((2, 2, 2), 0.5)
    nu1 = np.eye(2)
    return build_from_latent([psi0, psi1], [nu0, nu1], np.ones(1), horizon=2, num_actions=2)
