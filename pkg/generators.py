import logging
from dataclasses import dataclass
from typing import List, Mapping, Sequence

import numpy as np

from config import STOCHASTIC_TOL
from errors import ConfigError, GenerationFailed
from function_spaces import FeatureClass, FeatureMap, RewardFunction
from mdp_core import LatentLowRankMDP, build_from_latent, make_stream

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 1000
DECOY_KINDS = ("permutation", "simplex", "noisy")
NOISY_MIN_DISTANCE = 0.05


@dataclass(frozen=True)
class EnvParams:
    """合成环境参数；psi_kind 为 dirichlet 或 uniform"""
    horizon: int = 3
    actions: int = 2
    states: int = 12
    latents: int = 3
    eta_floor: float = 0.05
    psi_kind: str = "dirichlet"
    psi_concentration: float = 0.3
    nu_concentration: float = 0.3

    def __post_init__(self):
        for name in ("horizon", "actions", "states", "latents"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} 必须为正整数: {getattr(self, name)}")
        if self.psi_kind not in ("dirichlet", "uniform"):
            raise ConfigError(f"未知 psi_kind: {self.psi_kind}")
        if self.psi_concentration <= 0 or self.nu_concentration <= 0:
            raise ConfigError("Dirichlet 浓度参数必须为正")

    @classmethod
    def from_settings(cls, settings: Mapping[str, str]) -> "EnvParams":
        try:
            return cls(
                horizon=int(settings["horizon"]),
                actions=int(settings["actions"]),
                states=int(settings["states"]),
                latents=int(settings["latents"]),
                eta_floor=float(settings["eta_floor"]),
                psi_kind=settings.get("psi_kind", "dirichlet"),
                psi_concentration=float(settings.get("psi_concentration", "0.3")),
                nu_concentration=float(settings.get("nu_concentration", "0.3")),
            )
        except (KeyError, ValueError) as e:
            raise ConfigError(f"环境参数无效: {e}") from e


def _draw_latent(params: EnvParams, rng: np.random.Generator):
    d, k, n = params.latents, params.actions, params.states
    if params.psi_kind == "uniform":
        psi = [np.full((n, k, d), 1.0 / d) for _ in range(params.horizon)]
    else:
        psi = [rng.dirichlet(np.full(d, params.psi_concentration), size=(n, k)) for _ in range(params.horizon)]
    nu = [rng.dirichlet(np.full(n, params.nu_concentration), size=d) for _ in range(params.horizon)]
    init = np.full(n, 1.0 / n)
    return psi, nu, init


def generate_env(params: EnvParams, seed: int) -> LatentLowRankMDP:
    """拒绝采样潜变量MDP，直到精确 η_min 不低于下限"""
    rng = make_stream(seed, "env")
    best = 0.0
    for attempt in range(1, MAX_ATTEMPTS + 1):
        psi, nu, init = _draw_latent(params, rng)
        mdp = build_from_latent(psi, nu, init, params.horizon, params.actions)
        if mdp.eta_min >= params.eta_floor - STOCHASTIC_TOL:
            logger.info(f"生成环境: 第 {attempt} 次尝试通过, eta_min={mdp.eta_min:.4g}, floor={params.eta_floor}")
            return mdp
        best = max(best, mdp.eta_min)
    raise GenerationFailed(f"{MAX_ATTEMPTS} 次尝试后仍未达到 η_min ≥ {params.eta_floor}（最好 {best:.4g}）")


def _permutation(d: int, rng: np.random.Generator) -> np.ndarray:
    if d == 1:
        return np.zeros(1, dtype=int)
    while True:
        perm = rng.permutation(d)
        if np.any(perm != np.arange(d)):
            return perm


def _noisy(star: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    scale = 0.2
    while True:
        table = star + rng.normal(scale=scale, size=star.shape)
        norms = np.linalg.norm(table, axis=2, keepdims=True)
        table = table / np.maximum(norms, 1.0)
        if np.abs(table - star).max() > NOISY_MIN_DISTANCE:
            return table
        scale *= 2.0


def make_decoy(star: FeatureMap, kind: str, rng: np.random.Generator, label: str) -> FeatureMap:
    """permutation: 固定坐标置换；simplex: 独立单纯形特征；noisy: 加噪后投影回单位球"""
    if kind == "permutation":
        table = star.table[:, :, _permutation(star.dim, rng)]
    elif kind == "simplex":
        table = rng.dirichlet(np.ones(star.dim), size=star.table.shape[:2])
    elif kind == "noisy":
        table = _noisy(star.table, rng)
    else:
        raise ConfigError(f"未知 decoy 类型: {kind}")
    return FeatureMap(star.level, table, label=label)


def parse_kinds(text: str) -> List[str]:
    kinds = [k.strip() for k in str(text).split(",") if k.strip()]
    unknown = [k for k in kinds if k not in DECOY_KINDS]
    if unknown:
        raise ConfigError(f"未知 decoy 类型: {', '.join(unknown)}")
    return kinds or list(DECOY_KINDS)


def generate_feature_class(mdp: LatentLowRankMDP, decoy_count: int, kinds: Sequence[str],
                           seed: int) -> FeatureClass:
    """Φ_h = {φ*_h} ∪ 干扰项，φ* 的位置随机并记录在 star_index 中"""
    if decoy_count < 0:
        raise ConfigError(f"decoy 数量不能为负: {decoy_count}")
    kinds = list(kinds) or list(DECOY_KINDS)
    levels = []
    star_index = []
    for h in range(mdp.horizon):
        rng = make_stream(seed, "features", h)
        star = FeatureMap(h, mdp.phi_star(h), label=f"phi_star_{h}")
        members = [make_decoy(star, kinds[i % len(kinds)], rng, label=f"decoy_{h}_{i}_{kinds[i % len(kinds)]}")
                   for i in range(decoy_count)]
        position = int(rng.integers(decoy_count + 1))
        members.insert(position, star)
        levels.append(tuple(members))
        star_index.append(position)
    logger.info(f"生成特征类: 每层 {decoy_count + 1} 个候选, kinds={kinds}, star_index={star_index}")
    return FeatureClass(tuple(levels), mdp.num_states(mdp.horizon), tuple(star_index))


def generate_rewards(mdp: LatentLowRankMDP, count: int, seed: int) -> List[RewardFunction]:
    """count 个各层独立均匀 [0,1] 的奖励函数"""
    rewards = []
    for i in range(count):
        rng = make_stream(seed, "rewards", i)
        tables = tuple(rng.random((mdp.num_states(h), mdp.num_actions)) for h in range(mdp.horizon))
        rewards.append(RewardFunction(tables, label=f"reward_{i}"))
    return rewards
