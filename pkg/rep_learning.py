import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import MAX_WORKERS
from errors import DimMismatch, EmptyClass
from function_spaces import Discriminator, DiscriminatorKind, FeatureMap, feature_design
from mdp_core import LevelData, as_weighted, make_stream
from regression import NextStateDesign, QuadMax, RidgeConfig, sym_quad_max
from workers import parallel_map

logger = logging.getLogger(__name__)


class OracleMode(str, Enum):
    MINMAXMIN = "minmaxmin"
    GREEDY = "greedy"
    EIGEN = "eigen"


@dataclass(frozen=True)
class SearchBudget:
    """截断判别器的 θ 搜索：球面随机重启 + 坐标上升"""
    restarts: int = 64
    steps: int = 200
    seed: int = 0
    min_step: float = 1e-3


@dataclass(frozen=True)
class GreedyConfig:
    """迭代贪心的全部派生量都由 (ε_tol, L, d) 现算"""
    epsilon_tol: float
    clip_high: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not self.epsilon_tol > 0:
            raise ValueError(f"ε_tol 必须为正: {self.epsilon_tol}")
        if self.dim < 1:
            raise ValueError(f"维度必须 >= 1: {self.dim}")

    @property
    def epsilon0(self) -> float:
        return self.epsilon_tol / (52.0 * self.dim ** 2)

    @property
    def threshold(self) -> float:
        return 24.0 * self.dim ** 2 * self.epsilon0 + self.epsilon0 ** 2

    @property
    def max_iterations(self) -> int:
        return int(math.ceil(52.0 * self.clip_high ** 2 * self.dim ** 2 / self.epsilon_tol - 1e-9))

    def radius(self, t: int) -> float:
        return self.clip_high * math.sqrt(self.dim * t) / 2.0

    @property
    def final_radius(self) -> float:
        return math.sqrt(13.0 * self.clip_high ** 4 * self.dim ** 3 / self.epsilon_tol)

    @property
    def fit_radius(self) -> float:
        return self.clip_high * math.sqrt(self.dim)


@dataclass(frozen=True, eq=False)
class DiscriminatorFamily:
    """判别器类：枚举 (φ', R)，θ 在半径 B 的球内连续取值"""
    kind: DiscriminatorKind
    next_features: Tuple[FeatureMap, ...]
    clip_high: float = 1.0
    bound: Optional[float] = None
    rewards: Tuple[np.ndarray, ...] = ()

    @classmethod
    def f_class(cls, next_features: Sequence[FeatureMap], clip_high: float = 1.0,
                bound: Optional[float] = None, clipped: bool = True) -> "DiscriminatorFamily":
        kind = DiscriminatorKind.F_CLIPPED if clipped else DiscriminatorKind.F_UNCLIPPED
        return cls(kind, tuple(next_features), clip_high, bound)

    @classmethod
    def g_class(cls, next_features: Sequence[FeatureMap], rewards: Sequence[np.ndarray],
                horizon: int, bound: Optional[float] = None) -> "DiscriminatorFamily":
        rewards = tuple(np.asarray(r, dtype=float) for r in rewards) or (None,)
        return cls(DiscriminatorKind.G_CLASS, tuple(next_features), float(horizon), bound, rewards)

    @classmethod
    def simplex(cls, next_features: Sequence[FeatureMap]) -> "DiscriminatorFamily":
        return cls(DiscriminatorKind.F_SIMPLEX_COORD, tuple(next_features))

    @property
    def num_next(self) -> int:
        return self.next_features[0].num_states

    def radius_for(self, feature: FeatureMap) -> float:
        floor = self.clip_high * math.sqrt(feature.dim)
        return floor if self.bound is None else max(float(self.bound), floor)

    def members(self) -> List[Tuple[FeatureMap, Optional[np.ndarray]]]:
        if self.kind == DiscriminatorKind.G_CLASS:
            return [(f, r) for f in self.next_features for r in self.rewards]
        return [(f, None) for f in self.next_features]

    def make(self, feature: FeatureMap, reward: Optional[np.ndarray],
             theta: Optional[np.ndarray] = None, coord: Optional[int] = None) -> Discriminator:
        return Discriminator(self.kind, feature, theta=theta, bound=self.radius_for(feature),
                             reward=reward, coord=coord, clip_high=self.clip_high)

    def values_batch(self, feature: FeatureMap, reward: Optional[np.ndarray], thetas: np.ndarray) -> np.ndarray:
        """(k, d') 个 θ 在全部下一层状态上的取值 (k, |X'|)"""
        if self.kind == DiscriminatorKind.G_CLASS:
            raw = np.einsum("xad,kd->kxa", feature.table, thetas)
            if reward is not None:
                raw = raw + reward[None]
            return np.clip(raw.max(axis=2), 0.0, self.clip_high)
        raw = thetas @ feature.action_mean.T
        if self.kind == DiscriminatorKind.F_CLIPPED:
            return np.clip(raw, 0.0, self.clip_high)
        return raw


@dataclass
class OracleReport:
    mode: str
    level: int
    chosen_index: int
    chosen_label: str
    objective: float
    objectives: List[float] = field(default_factory=list)
    iterations: int = 0
    termination: str = ""
    witnesses: List[Dict[str, Any]] = field(default_factory=list)
    search_gap: float = 0.0
    budget_exhausted: bool = False
    wall_clock: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class GapObjective:
    """v ↦ min_{∥w∥≤B} L(φ,w,v) − min_{φ̃, ∥w̃∥≤R} L(φ̃,w̃,v)（均值损失）"""

    def __init__(self, fit: NextStateDesign, fit_radius: float,
                 references: Sequence[NextStateDesign], ref_radius: float):
        self.fit = fit
        self.fit_radius = fit_radius
        self.references = list(references)
        self.ref_radius = ref_radius

    def batch(self, values: np.ndarray) -> np.ndarray:
        values = np.atleast_2d(values)
        own = self.fit.min_loss(values, self.fit_radius)
        best_ref = np.min([ref.min_loss(values, self.ref_radius) for ref in self.references], axis=0)
        return own - best_ref

    def exact(self, values: np.ndarray) -> float:
        own = self.fit.fit(values, self.fit_radius).loss
        best_ref = min(ref.fit(values, self.ref_radius).loss for ref in self.references)
        return float(own - best_ref)


@dataclass
class Witness:
    discriminator: Discriminator
    value: float
    search_value: float
    exhausted: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "discriminator": self.discriminator.to_dict(),
            "value": self.value,
            "search_value": self.search_value,
            "exhausted": self.exhausted,
        }


def _project_ball(thetas: np.ndarray, radius: float) -> np.ndarray:
    norms = np.linalg.norm(thetas, axis=-1, keepdims=True)
    scale = np.where(norms > radius, radius / np.maximum(norms, 1e-300), 1.0)
    return thetas * scale


def coordinate_ascent(score: Callable[[np.ndarray], np.ndarray], dim: int, radius: float,
                      budget: SearchBudget, rng: np.random.Generator) -> Tuple[np.ndarray, float, bool]:
    """在 ∥θ∥ ≤ radius 上最大化 score；所有重启并行推进，无改进时步长减半"""
    thetas = rng.standard_normal((budget.restarts, dim))
    norms = np.linalg.norm(thetas, axis=1, keepdims=True)
    thetas = radius * thetas / np.where(norms > 0, norms, 1.0)
    current = score(thetas)
    step = np.full(budget.restarts, radius / 2.0)
    active = np.ones(budget.restarts, dtype=bool)
    moves = np.vstack([np.eye(dim), -np.eye(dim)])

    for _ in range(budget.steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        candidates = _project_ball(thetas[idx][:, None, :] + step[idx][:, None, None] * moves[None], radius)
        scores = score(candidates.reshape(-1, dim)).reshape(idx.size, moves.shape[0])
        best = np.argmax(scores, axis=1)
        best_scores = scores[np.arange(idx.size), best]
        gain = best_scores > current[idx] + 1e-12
        thetas[idx[gain]] = candidates[gain, best[gain]]
        current[idx[gain]] = best_scores[gain]
        step[idx[~gain]] /= 2.0
        active &= step >= budget.min_step * radius

    r = int(np.argmax(current))
    return thetas[r], float(current[r]), bool(active.any())


def eigen_triple_value(design: NextStateDesign, design_tilde: NextStateDesign,
                       next_feature: FeatureMap, ridge: RidgeConfig,
                       radius: Optional[float] = None) -> QuadMax:
    """max_{∥θ∥≤√d'} θᵀ X'ᵀ(A(φ)ᵀA(φ) − A(φ̃)ᵀA(φ̃))X' θ"""
    radius = math.sqrt(next_feature.dim) if radius is None else radius
    lifted = next_feature.action_mean
    quad = design.ridge_residual_quadratic(ridge) - design_tilde.ridge_residual_quadratic(ridge)
    return sym_quad_max(lifted.T @ quad @ lifted, radius)


def find_witness(objective: GapObjective, family: DiscriminatorFamily, budget: SearchBudget,
                 tags: Tuple = ()) -> Witness:
    """在判别器类上最大化 objective；结果总是用精确约束最小二乘重新打分"""
    best: Optional[Witness] = None

    def consider(candidate: Discriminator, search_value: float, exhausted: bool = False):
        nonlocal best
        value = objective.exact(candidate.values())
        if best is None or value > best.value + 1e-12:
            best = Witness(candidate, value, search_value, exhausted)
        elif exhausted:
            best.exhausted = True

    for pair_index, (feature, reward) in enumerate(family.members()):
        if family.kind == DiscriminatorKind.F_SIMPLEX_COORD:
            scores = objective.batch(feature.action_mean.T)
            coord = int(np.argmax(scores))
            consider(family.make(feature, None, coord=coord), float(scores[coord]))
            continue

        radius = family.radius_for(feature)
        zero = np.zeros(feature.dim)
        consider(family.make(feature, reward, theta=zero), float(objective.batch(
            family.values_batch(feature, reward, zero[None]))[0]))

        if family.kind == DiscriminatorKind.F_UNCLIPPED:
            ridge = RidgeConfig.from_radius(objective.fit_radius)
            for reference in objective.references:
                quad = eigen_triple_value(objective.fit, reference, feature, ridge, radius)
                if quad.value > 0:
                    consider(family.make(feature, reward, theta=quad.theta), quad.value)
            continue

        rng = make_stream(budget.seed, "witness", *tags, pair_index)
        theta, value, exhausted = coordinate_ascent(
            lambda thetas: objective.batch(family.values_batch(feature, reward, thetas)),
            feature.dim, radius, budget, rng)
        consider(family.make(feature, reward, theta=_project_ball(theta, radius)), value, exhausted)

    return best


def _check_features(features: Sequence[FeatureMap]):
    if not features:
        raise EmptyClass("候选特征类为空")
    if len({f.dim for f in features}) != 1:
        raise DimMismatch("候选特征维度不一致")


def flo_minmaxmin(features: Sequence[FeatureMap], family: DiscriminatorFamily, data: LevelData,
                  bound: float, clip_high: float = 1.0, budget: SearchBudget = SearchBudget(),
                  max_workers: int = MAX_WORKERS) -> Tuple[FeatureMap, OracleReport]:
    """方差修正的 min-max-min：argmin_φ max_v [min_w L(φ,w,v) − min_{φ̃,w̃} L(φ̃,w̃,v)]"""
    _check_features(features)
    started = time.time()
    weighted = as_weighted(data)
    designs = [feature_design(f, weighted, family.num_next) for f in features]
    ref_radius = clip_high * math.sqrt(features[0].dim)

    def evaluate(index: int) -> Witness:
        objective = GapObjective(designs[index], bound, designs, ref_radius)
        return find_witness(objective, family, budget, tags=(weighted.level, "flo", index))

    witnesses = parallel_map(evaluate, range(len(features)), max_workers)
    objectives = [w.value for w in witnesses]
    chosen = int(np.argmin(objectives))
    report = OracleReport(
        mode=OracleMode.MINMAXMIN.value,
        level=weighted.level,
        chosen_index=chosen,
        chosen_label=features[chosen].label,
        objective=objectives[chosen],
        objectives=objectives,
        witnesses=[w.to_dict() for w in witnesses],
        search_gap=float(witnesses[chosen].search_value - witnesses[chosen].value),
        budget_exhausted=any(w.exhausted for w in witnesses),
        wall_clock=time.time() - started,
    )
    if report.budget_exhausted:
        logger.warning(f"第 {weighted.level} 层 θ 搜索用完步数预算，返回当前最优结果")
    logger.info(f"min-max-min 第 {weighted.level} 层选择 {report.chosen_label}，目标值 {report.objective:.6g}")
    return features[chosen], report


def flo_eigen(features: Sequence[FeatureMap], next_features: Sequence[FeatureMap], data: LevelData,
              ridge: RidgeConfig, max_workers: int = MAX_WORKERS) -> Tuple[FeatureMap, OracleReport]:
    """可枚举类的岭回归 + 特征向量归约，枚举 (φ, φ̃, φ') 三元组"""
    _check_features(features)
    if not next_features:
        raise EmptyClass("下一层特征类为空")
    started = time.time()
    weighted = as_weighted(data)
    num_next = next_features[0].num_states
    designs = [feature_design(f, weighted, num_next) for f in features]
    quads = parallel_map(lambda d: d.ridge_residual_quadratic(ridge), designs, max_workers)

    def evaluate(index: int) -> Dict[str, Any]:
        best = {"value": 0.0, "tilde": index, "next": 0, "theta": np.zeros(next_features[0].dim).tolist()}
        for j in range(len(features)):
            if j == index:
                continue
            for k, nxt in enumerate(next_features):
                lifted = nxt.action_mean
                result = sym_quad_max(lifted.T @ (quads[index] - quads[j]) @ lifted, math.sqrt(nxt.dim))
                if result.value > best["value"]:
                    best = {"value": result.value, "tilde": j, "next": k, "theta": result.theta.tolist()}
        return best

    witnesses = parallel_map(evaluate, range(len(features)), max_workers)
    objectives = [w["value"] for w in witnesses]
    chosen = int(np.argmin(objectives))
    report = OracleReport(
        mode=OracleMode.EIGEN.value,
        level=weighted.level,
        chosen_index=chosen,
        chosen_label=features[chosen].label,
        objective=objectives[chosen],
        objectives=objectives,
        witnesses=witnesses,
        wall_clock=time.time() - started,
    )
    logger.info(f"特征向量归约 第 {weighted.level} 层选择 {report.chosen_label}，目标值 {report.objective:.6g}")
    return features[chosen], report


def _initial_witness(family: DiscriminatorFamily) -> Discriminator:
    feature, reward = family.members()[0]
    if family.kind == DiscriminatorKind.F_SIMPLEX_COORD:
        return family.make(feature, None, coord=0)
    return family.make(feature, reward, theta=np.zeros(feature.dim))


def greedy_select(features: Sequence[FeatureMap], family: DiscriminatorFamily, data: LevelData,
                  cfg: GreedyConfig, budget: SearchBudget = SearchBudget(),
                  max_workers: int = MAX_WORKERS) -> Tuple[FeatureMap, OracleReport]:
    """迭代贪心：拟合特征 / 寻找见证判别器，直到见证值低于阈值"""
    _check_features(features)
    if features[0].dim != cfg.dim:
        raise DimMismatch(f"GreedyConfig.dim={cfg.dim} 与特征维度 {features[0].dim} 不一致")
    started = time.time()
    weighted = as_weighted(data)
    designs = [feature_design(f, weighted, family.num_next) for f in features]

    witness_values = [_initial_witness(family).values()]
    history: List[Dict[str, Any]] = []
    chosen = 0
    gap = math.inf
    termination = "iteration_cap"
    exhausted = False

    for t in range(1, cfg.max_iterations + 1):
        targets = np.stack(witness_values)
        losses = parallel_map(lambda d: float(d.min_loss(targets, cfg.fit_radius).sum()), designs, max_workers)
        chosen = int(np.argmin(losses))

        objective = GapObjective(designs[chosen], cfg.radius(t), designs, cfg.fit_radius)
        witness = find_witness(objective, family, budget, tags=(weighted.level, "greedy", t))
        gap = witness.value
        exhausted = exhausted or witness.exhausted
        history.append({"t": t, "chosen": chosen, "fit_loss": losses[chosen], "witness_value": gap,
                        "witness": witness.discriminator.to_dict()})
        logger.debug(f"贪心 t={t}: 选择 {features[chosen].label}，见证值 {gap:.6g}")

        if gap < cfg.threshold:
            termination = "converged"
            break
        witness_values.append(witness.discriminator.values())

    if termination != "converged":
        logger.warning(f"贪心第 {weighted.level} 层达到迭代上限 {cfg.max_iterations}")
    report = OracleReport(
        mode=OracleMode.GREEDY.value,
        level=weighted.level,
        chosen_index=chosen,
        chosen_label=features[chosen].label,
        objective=float(gap),
        iterations=len(history),
        termination=termination,
        witnesses=history,
        budget_exhausted=exhausted,
        wall_clock=time.time() - started,
    )
    logger.info(f"贪心第 {weighted.level} 层在 {report.iterations} 轮后选择 {report.chosen_label} ({termination})")
    return features[chosen], report
