import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from config import MAX_WORKERS
from errors import LevelMismatch, MissingLevelData, PolicyHorizonMismatch
from function_spaces import FeatureClass, FeatureMap, RewardFunction, feature_design, greedy_policy_from_q
from mdp_core import LevelData, MixturePolicy, Policy, as_weighted
from workers import parallel_map

logger = logging.getLogger(__name__)


class FqiVariant(str, Enum):
    """FULL_CLASS: 全部 φ，半径 H√d，V 截断到 [0,H]；
    REPRESENTATION: 单一 φ̄，半径 B，[0,H]；
    ELLIPTICAL: 全部 φ，半径 √d，[0,1]。
    """
    FULL_CLASS = "full_class"
    REPRESENTATION = "representation"
    ELLIPTICAL = "elliptical"


def variant_radius(variant: FqiVariant, dim: int, horizon: int, bound: Optional[float] = None) -> float:
    if variant == FqiVariant.ELLIPTICAL:
        return math.sqrt(dim)
    if variant == FqiVariant.REPRESENTATION and bound is not None:
        return float(bound)
    return horizon * math.sqrt(dim)


def variant_clip(variant: FqiVariant, horizon: int) -> float:
    return 1.0 if variant == FqiVariant.ELLIPTICAL else float(horizon)


@dataclass
class FqiResult:
    policy: Policy
    q_tables: Tuple[np.ndarray, ...]
    values: Tuple[np.ndarray, ...]
    chosen: Tuple[str, ...]
    weights: Tuple[np.ndarray, ...]


def _reward_tables(rewards) -> Tuple[np.ndarray, ...]:
    if not isinstance(rewards, RewardFunction):
        rewards = RewardFunction(tuple(rewards))
    return rewards.tables


def _check_datasets(datasets: Sequence[Optional[LevelData]], horizon: int):
    for h in range(horizon):
        if h >= len(datasets) or datasets[h] is None:
            raise MissingLevelData(f"缺少第 {h} 层数据集")
        if datasets[h].level != h:
            raise LevelMismatch(f"第 {h} 个数据集的层号为 {datasets[h].level}")


def _fit_level(datasets, features: FeatureClass, h: int, targets: np.ndarray, radius: Optional[float],
               variant: FqiVariant, horizon: int, bound: Optional[float]):
    """在第 h 层枚举候选特征，返回损失最小者（平局取最小下标）"""
    weighted = as_weighted(datasets[h])
    candidates = features.at(h)
    num_next = features.next_level(h)[0].num_states
    if radius is None:
        radius = variant_radius(variant, candidates[0].dim, horizon, bound)
    fits = [feature_design(f, weighted, num_next).fit(targets, radius) for f in candidates]
    best = int(np.argmin([fit.loss for fit in fits]))
    return candidates[best], fits[best]


def fit_q(datasets: Sequence[LevelData], rewards, variant: FqiVariant, features: FeatureClass,
          radius: Optional[float] = None, bound: Optional[float] = None,
          horizon: Optional[int] = None) -> FqiResult:
    """FQI 后向迭代：目标为 V̂_{h+1}(x')，奖励作为偏移单独加回"""
    tables = _reward_tables(rewards)
    depth = len(tables)
    _check_datasets(datasets, depth)
    horizon = features.horizon if horizon is None else horizon
    clip_high = variant_clip(variant, horizon)

    q_tables: List[Optional[np.ndarray]] = [None] * depth
    values: List[Optional[np.ndarray]] = [None] * depth
    chosen: List[str] = [""] * depth
    weights: List[Optional[np.ndarray]] = [None] * depth
    v_next = np.zeros(features.next_level(depth - 1)[0].num_states)

    for h in range(depth - 1, -1, -1):
        feature, fit = _fit_level(datasets, features, h, v_next, radius, variant, horizon, bound)
        prediction = feature.table @ fit.weight
        if variant == FqiVariant.REPRESENTATION:
            prediction = np.clip(prediction, 0.0, clip_high)
        q = tables[h] + prediction
        q_tables[h] = q
        values[h] = np.clip(q.max(axis=1), 0.0, clip_high)
        chosen[h] = feature.label
        weights[h] = fit.weight
        v_next = values[h]
        logger.debug(f"FQI[{variant.value}] 第 {h} 层选择 {feature.label}，损失 {fit.loss:.6g}")

    policy = greedy_policy_from_q(q_tables, label=f"fqi_{variant.value}")
    return FqiResult(policy, tuple(q_tables), tuple(values), tuple(chosen), tuple(weights))


def fqi(datasets: Sequence[LevelData], rewards, variant: FqiVariant, features: FeatureClass,
        radius: Optional[float] = None, bound: Optional[float] = None,
        horizon: Optional[int] = None) -> Policy:
    return fit_q(datasets, rewards, variant, features, radius, bound, horizon).policy


def fqe(datasets: Sequence[LevelData], rewards, policy: Policy, features: FeatureClass,
        init: np.ndarray, radius: Optional[float] = None) -> float:
    """FQE：V̂_h(x) = clip_[0,1](Σ_a π(a|x) f̂(x,a))，返回初始分布下的 V̂_0"""
    tables = _reward_tables(rewards)
    depth = len(tables)
    _check_datasets(datasets, depth)
    if policy.last_level < depth - 1:
        raise PolicyHorizonMismatch(f"待评估策略只覆盖到第 {policy.last_level} 层")

    v_next = np.zeros(features.next_level(depth - 1)[0].num_states)
    for h in range(depth - 1, -1, -1):
        feature, fit = _fit_level(datasets, features, h, v_next, radius,
                                  FqiVariant.ELLIPTICAL, features.horizon, None)
        q = tables[h] + feature.table @ fit.weight
        v_next = np.clip(np.sum(policy.action_probs(h) * q, axis=1), 0.0, 1.0)
    return float(np.asarray(init) @ v_next)


def elliptical_iteration_bound(dim: int, beta: float) -> int:
    """ceil((8d/β)·log(1+8/β))"""
    return int(math.ceil(8.0 * dim / beta * math.log(1.0 + 8.0 / beta)))


def elliptical_bonus(feature: FeatureMap, gamma: np.ndarray) -> np.ndarray:
    """∥φ(x,a)∥²_{Γ⁻¹}，λ_min(Γ) ≥ 1 时落在 [0,1]"""
    gamma_inv = linalg.inv(gamma)
    bonus = np.einsum("xad,de,xae->xa", feature.table, gamma_inv, feature.table)
    return np.clip(bonus, 0.0, 1.0)


@dataclass
class EllipticalResult:
    mixture: MixturePolicy
    gamma: np.ndarray
    trace: List[Dict[str, Any]] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def _floor_eigenvalues(gamma: np.ndarray) -> Tuple[np.ndarray, bool]:
    evals, evecs = linalg.eigh((gamma + gamma.T) / 2.0)
    if evals.min() >= 1.0:
        return gamma, False
    return (evecs * np.maximum(evals, 1.0)) @ evecs.T, True


def elliptical_planner(last_level: int, feature: FeatureMap, datasets: Sequence[LevelData],
                       features: FeatureClass, beta: float, init: np.ndarray,
                       max_iterations: Optional[int] = None,
                       max_workers: int = MAX_WORKERS) -> EllipticalResult:
    """离线椭圆规划：反复以 ∥φ̂∥²_{Γ⁻¹} 为终端奖励做 FQI，再用 FQE 估计协方差和期望回报"""
    if not 0 < beta <= 1:
        raise ValueError(f"β 必须在 (0, 1] 内: {beta}")
    if feature.level != last_level:
        raise LevelMismatch(f"特征层号 {feature.level} 与规划层 {last_level} 不一致")
    datasets = list(datasets[:last_level + 1])
    _check_datasets(datasets, last_level + 1)

    dim = feature.dim
    counts = [features.at(h)[0].num_states for h in range(last_level + 1)]
    num_actions = feature.num_actions
    cap = max_iterations or elliptical_iteration_bound(dim, beta) + 5
    pairs = [(i, j) for i in range(dim) for j in range(i, dim)]
    entry_rewards = [
        RewardFunction.at_level(counts, num_actions, last_level,
                                (1.0 + feature.table[:, :, i] * feature.table[:, :, j]) / 2.0, label=f"cov_{i}{j}")
        for i, j in pairs
    ]

    gamma = np.eye(dim)
    policies: List[Policy] = []
    trace: List[Dict[str, Any]] = []
    converged = False

    for t in range(1, cap + 1):
        reward = RewardFunction.at_level(counts, num_actions, last_level,
                                         elliptical_bonus(feature, gamma), label=f"elliptical_{t}")
        policy = fqi(datasets, reward, FqiVariant.ELLIPTICAL, features)
        policies.append(policy)

        estimates = parallel_map(lambda r: fqe(datasets, r, policy, features, init), entry_rewards, max_workers)
        sigma = np.zeros((dim, dim))
        for (i, j), v in zip(pairs, estimates):
            # 对角元是二阶矩，下界取 0
            sigma[i, j] = sigma[j, i] = np.clip(2.0 * v - 1.0, 0.0 if i == j else -1.0, 1.0)

        gamma, floored = _floor_eigenvalues(gamma + sigma)
        if floored:
            logger.warning(f"椭圆规划 第 {last_level} 层 t={t}: Γ 最小特征值低于 1，已截断")

        v_hat = float(np.clip(fqe(datasets, reward, policy, features, init), 0.0, 1.0))
        evals = linalg.eigvalsh(gamma)
        trace.append({
            "level": last_level,
            "t": t,
            "v_hat": v_hat,
            "trace_gamma": float(np.trace(gamma)),
            "lambda_min_gamma": float(evals[0]),
            "floored": floored,
        })
        logger.debug(f"椭圆规划 第 {last_level} 层 t={t}: v̂={v_hat:.4f}, tr Γ={np.trace(gamma):.4f}")

        if v_hat <= 0.75 * beta:
            converged = True
            break

    if converged:
        logger.info(f"椭圆规划 第 {last_level} 层在 {len(policies)} 轮后收敛")
    else:
        logger.warning(f"椭圆规划 第 {last_level} 层达到迭代上限 {cap} 仍未收敛")
    mixture = MixturePolicy(tuple(policies), last_level, 0, label=f"rho_{last_level}")
    return EllipticalResult(mixture, gamma, trace, converged, len(policies))
