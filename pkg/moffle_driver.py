import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from config import MAX_WORKERS, PLANNER_ITERATION_LIMIT, parse_bool
from errors import ConfigError, LevelMismatch
from function_spaces import FeatureClass, FeatureMap, RewardFunction
from mdp_core import (AnyPolicy, LatentLowRankMDP, LevelData, MixturePolicy, Policy, collect_dataset,
                      exact_bellman_backup, exact_latent_occupancy, exact_state_action_occupancy,
                      exact_weighted_transitions, make_stream, max_expected_reward_at, policy_from_dict)
from planners import FqiVariant, elliptical_iteration_bound, elliptical_planner, fit_q
from regression import RidgeConfig, constrained_lsq
from rep_learning import (DiscriminatorFamily, GreedyConfig, OracleMode, SearchBudget, flo_eigen,
                          flo_minmaxmin, greedy_select)

logger = logging.getLogger(__name__)


def solve_beta(eta_min: float, dim: int, num_actions: int, bound: float, action_power: int = 4) -> float:
    """求 β log(1+8/β) ≤ η²/(128 d K^p B²) 在 (0,1] 内的最大解"""
    rhs = eta_min ** 2 / (128.0 * dim * num_actions ** action_power * bound ** 2)

    def excess(beta: float) -> float:
        return (beta * math.log1p(8.0 / beta) if beta > 0 else 0.0) - rhs

    if excess(1.0) <= 0:
        return 1.0
    return optimize.bisect(excess, 0.0, 1.0, xtol=1e-300, rtol=1e-12, maxiter=400)


@dataclass(frozen=True)
class MoffleConfig:
    """MOFFLE 的全部参数；派生量由原始量现算，显式覆盖会记录日志"""
    eta_min: float
    dim: int
    num_actions: int
    horizon: int
    epsilon: float = 0.1
    delta: float = 0.1
    n_phi_hat: int = 10000
    n_ell: int = 10000
    n_phi_bar: int = 10000
    n_plan: int = 10000
    oracle: OracleMode = OracleMode.EIGEN
    simplex_mode: bool = False
    clipped: bool = True
    feature_radius: Optional[float] = None
    g_radius: Optional[float] = None
    beta_override: Optional[float] = None
    epsilon_reg_override: Optional[float] = None
    epsilon_apx_override: Optional[float] = None
    ridge_lambda_override: Optional[float] = None
    lag_override: Optional[int] = None
    downstream_override: Optional[FqiVariant] = None
    planner_max_iterations: Optional[int] = None
    search: SearchBudget = SearchBudget()
    exact_data: bool = False
    max_workers: int = MAX_WORKERS

    def __post_init__(self):
        if not self.eta_min > 0:
            raise ConfigError(f"η_min 必须为正: {self.eta_min}")
        for name in ("n_phi_hat", "n_ell", "n_phi_bar", "n_plan"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} 必须 >= 1")
        for name in ("beta_override", "epsilon_reg_override", "epsilon_apx_override",
                     "ridge_lambda_override", "lag_override", "downstream_override"):
            value = getattr(self, name)
            if value is not None:
                logger.info(f"配置覆盖: {name.replace('_override', '')} = {value}")

    @property
    def action_power(self) -> int:
        return 2 if self.simplex_mode else 4

    @property
    def bound(self) -> float:
        """F 类的 B（默认 √d）"""
        return self.feature_radius if self.feature_radius is not None else math.sqrt(self.dim)

    @property
    def g_bound(self) -> float:
        return self.g_radius if self.g_radius is not None else self.horizon * math.sqrt(self.dim)

    @property
    def beta(self) -> float:
        if self.beta_override is not None:
            return self.beta_override
        return solve_beta(self.eta_min, self.dim, self.num_actions, self.bound, self.action_power)

    @property
    def kappa(self) -> float:
        return 64.0 * self.dim * self.num_actions ** self.action_power * math.log1p(8.0 / self.beta) / self.eta_min

    @property
    def epsilon_reg(self) -> float:
        if self.epsilon_reg_override is not None:
            return self.epsilon_reg_override
        power = 5 if self.simplex_mode else 9
        return self.eta_min ** 3 / (self.dim ** 2 * self.num_actions ** power * math.log1p(8.0 / self.beta) ** 2)

    @property
    def epsilon_apx(self) -> float:
        if self.epsilon_apx_override is not None:
            return self.epsilon_apx_override
        return self.epsilon ** 2 / (16.0 * self.horizon ** 4 * self.kappa * self.num_actions)

    @property
    def lag(self) -> int:
        if self.lag_override is not None:
            return self.lag_override
        return 1 if self.simplex_mode else 2

    @property
    def append(self) -> int:
        """数据策略 ρ_{h−append}^{+append} 中附加的均匀动作数"""
        return self.lag + 1

    @property
    def ridge(self) -> RidgeConfig:
        if self.ridge_lambda_override is not None:
            return RidgeConfig(self.ridge_lambda_override)
        return RidgeConfig.from_radius(self.bound)

    @property
    def downstream_variant(self) -> FqiVariant:
        if self.downstream_override is not None:
            return self.downstream_override
        return FqiVariant.FULL_CLASS if self.oracle == OracleMode.EIGEN else FqiVariant.REPRESENTATION

    @property
    def planner_cap(self) -> int:
        if self.planner_max_iterations is not None:
            return self.planner_max_iterations
        return elliptical_iteration_bound(self.dim, self.beta) + 5

    def check_planner_budget(self, limit: int = PLANNER_ITERATION_LIMIT):
        """β 由公式推导时上限可达上亿轮，超过 limit 时要求显式给出 beta 或 planner_max_iterations"""
        if self.planner_max_iterations is None and self.planner_cap > limit:
            raise ConfigError(f"椭圆规划迭代上限 {self.planner_cap} 超过 {limit}（β={self.beta:.3g}），"
                              f"请设置 beta 或 planner_max_iterations")

    @property
    def n_total(self) -> int:
        return max(self.n_phi_hat, self.n_ell, self.n_phi_bar, self.n_plan)

    def summary(self) -> Dict[str, Any]:
        return {
            "eta_min": self.eta_min,
            "beta": self.beta,
            "kappa": self.kappa,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "epsilon_reg": self.epsilon_reg,
            "epsilon_apx": self.epsilon_apx,
            "lag": self.lag,
            "append": self.append,
            "ridge_lambda": self.ridge.lam,
            "feature_radius": self.bound,
            "g_radius": self.g_bound,
            "oracle": self.oracle.value,
            "simplex_mode": self.simplex_mode,
            "downstream_variant": self.downstream_variant.value,
        }

    @classmethod
    def from_settings(cls, settings: Mapping[str, str], mdp: LatentLowRankMDP) -> "MoffleConfig":
        """由扁平配置构造；η_min 留空时取环境的精确值"""

        def optional(key: str, cast=float):
            value = str(settings.get(key, "")).strip()
            if not value:
                return None
            try:
                return cast(value)
            except ValueError as e:
                raise ConfigError(f"配置项 {key} 无法解析: {value}") from e

        try:
            oracle = OracleMode(settings.get("oracle", "eigen"))
        except ValueError as e:
            raise ConfigError(f"未知 oracle: {settings.get('oracle')}") from e
        mode = settings.get("discriminator_mode", "clipped")
        if mode not in ("clipped", "unclipped"):
            raise ConfigError(f"discriminator_mode 只能为 clipped/unclipped: {mode}")
        downstream = optional("downstream_variant", str)
        try:
            downstream = FqiVariant(downstream) if downstream else None
        except ValueError as e:
            raise ConfigError(f"未知 downstream_variant: {downstream}") from e

        eta_min = optional("eta_min")
        return cls(
            eta_min=eta_min if eta_min is not None else mdp.eta_min,
            dim=mdp.dim,
            num_actions=mdp.num_actions,
            horizon=mdp.horizon,
            epsilon=float(settings.get("epsilon", "0.1")),
            delta=float(settings.get("delta", "0.1")),
            n_phi_hat=int(settings.get("n_phi_hat", "10000")),
            n_ell=int(settings.get("n_ell", "10000")),
            n_phi_bar=int(settings.get("n_phi_bar", "10000")),
            n_plan=int(settings.get("n_plan", "10000")),
            oracle=oracle,
            simplex_mode=parse_bool(settings.get("simplex_mode", "false")),
            clipped=mode == "clipped",
            feature_radius=optional("feature_radius"),
            g_radius=optional("g_radius"),
            beta_override=optional("beta"),
            epsilon_reg_override=optional("epsilon_reg"),
            epsilon_apx_override=optional("epsilon_apx"),
            ridge_lambda_override=optional("ridge_lambda"),
            lag_override=optional("lag", int),
            downstream_override=downstream,
            planner_max_iterations=optional("planner_max_iterations", int),
            search=SearchBudget(restarts=int(settings.get("search_restarts", "64")),
                                steps=int(settings.get("search_steps", "200")),
                                seed=int(settings.get("seed", "0"))),
            exact_data=parse_bool(settings.get("exact_data", "false")),
            max_workers=int(settings.get("max_workers", str(MAX_WORKERS))),
        )


def _offset_tag(policy: AnyPolicy) -> str:
    """数据来源标签 rho[j]+i，用于检查各层数据的策略下标"""
    return f"rho[{policy.last_level}]+{getattr(policy, 'extra', 0)}"


class EnvironmentAccess:
    """学习器与环境之间唯一的交互口：按层统一采集一次数据，再切片复用"""

    def __init__(self, mdp: LatentLowRankMDP, seed: int, exact: bool = False):
        self.mdp = mdp
        self.seed = int(seed)
        self.exact = exact
        self.episodes = 0
        self._level_data: Dict[int, LevelData] = {}
        self._slices: Dict[Tuple[int, int], LevelData] = {}

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    @property
    def num_actions(self) -> int:
        return self.mdp.num_actions

    @property
    def state_counts(self) -> Tuple[int, ...]:
        return self.mdp.state_counts

    @property
    def init(self) -> np.ndarray:
        return self.mdp.init

    def collect_level(self, level: int, policy: AnyPolicy, n: int) -> LevelData:
        if level in self._level_data:
            return self._level_data[level]
        if self.exact:
            data = exact_weighted_transitions(self.mdp, policy, level)
        else:
            rng = make_stream(self.seed, "collect", level)
            data = collect_dataset(self.mdp, policy, level, n, rng, tag=_offset_tag(policy))
            self.episodes += n
        logger.info(f"第 {level} 层采集数据: policy={getattr(policy, 'label', '')}, n={n}, exact={self.exact}")
        self._level_data[level] = data
        return data

    def dataset(self, level: int, n: int) -> LevelData:
        """统一数据集的前 n 条；精确模式下直接返回加权分布"""
        data = self._level_data.get(level)
        if data is None:
            raise LevelMismatch(f"第 {level} 层尚未采集数据")
        if self.exact:
            return data
        key = (level, int(n))
        if key not in self._slices:
            self._slices[key] = data.head(n)
        return self._slices[key]

    def level_data(self) -> List[LevelData]:
        return [self._level_data[h] for h in sorted(self._level_data)]


@dataclass
class PolicyCover:
    """每层的混合策略 ρ_h 及其附加均匀动作的访问器"""
    policies: List[MixturePolicy]
    planned: List[bool]
    append: int
    gammas: List[Optional[np.ndarray]] = field(default_factory=list)
    features: List[FeatureMap] = field(default_factory=list)
    reports: List[Dict[str, Any]] = field(default_factory=list)
    traces: List[List[Dict[str, Any]]] = field(default_factory=list)
    incomplete: bool = False

    @property
    def lag(self) -> int:
        return self.append - 1

    def rho(self, level: int, extra: int = 0) -> MixturePolicy:
        if level < 0:
            return MixturePolicy.uniform_prefix(level, extra)
        return self.policies[level].with_extra(extra)

    def data_policy(self, level: int) -> MixturePolicy:
        """第 level 层数据的采集策略 ρ_{level−append}^{+append}"""
        return self.rho(level - self.append, self.append)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "append": self.append,
            "incomplete": self.incomplete,
            "planned": list(self.planned),
            "policies": [p.to_dict() for p in self.policies],
            "gammas": [None if g is None else g.tolist() for g in self.gammas],
            "reports": self.reports,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PolicyCover":
        return cls(
            policies=[policy_from_dict(p) for p in data["policies"]],
            planned=list(data["planned"]),
            append=int(data["append"]),
            gammas=[None if g is None else np.asarray(g, dtype=float) for g in data.get("gammas", [])],
            reports=list(data.get("reports", [])),
            incomplete=bool(data.get("incomplete", False)),
        )


def _learn_explore_feature(features: FeatureClass, h: int, data: LevelData,
                           cfg: MoffleConfig) -> Tuple[FeatureMap, Dict[str, Any]]:
    candidates = features.at(h)
    next_features = features.next_level(h)
    if cfg.simplex_mode:
        family = DiscriminatorFamily.simplex(next_features)
    else:
        family = DiscriminatorFamily.f_class(next_features, 1.0, cfg.bound, clipped=cfg.clipped)

    if cfg.oracle == OracleMode.GREEDY:
        greedy_cfg = GreedyConfig(cfg.epsilon_reg, 1.0, candidates[0].dim)
        chosen, report = greedy_select(candidates, family, data, greedy_cfg, cfg.search, cfg.max_workers)
    elif cfg.oracle == OracleMode.EIGEN and not cfg.simplex_mode:
        chosen, report = flo_eigen(candidates, next_features, data, cfg.ridge, cfg.max_workers)
    else:
        chosen, report = flo_minmaxmin(candidates, family, data, cfg.bound, 1.0, cfg.search, cfg.max_workers)
    return chosen, report.to_dict()


def explore(env: EnvironmentAccess, features: FeatureClass, cfg: MoffleConfig) -> PolicyCover:
    """逐层学习 φ̂_h 并调用离线椭圆规划得到 ρ_h"""
    if features.horizon != env.horizon:
        raise LevelMismatch(f"特征类层数 {features.horizon} 与环境 H={env.horizon} 不一致")
    append = cfg.append
    if append <= env.horizon:
        cfg.check_planner_budget()
    cover = PolicyCover(policies=[], planned=[], append=append)
    ell_datasets: List[LevelData] = []

    for h in range(env.horizon):
        data_policy = cover.data_policy(h)
        env.collect_level(h, data_policy, cfg.n_total)
        ell_datasets.append(env.dataset(h, cfg.n_ell))

        phi_hat, report = _learn_explore_feature(features, h, env.dataset(h, cfg.n_phi_hat), cfg)
        report["data_policy"] = data_policy.label
        report["data_policy_offset"] = [h - append, append]
        cover.features.append(phi_hat)
        cover.reports.append(report)

        if h + append <= env.horizon:
            result = elliptical_planner(h, phi_hat, ell_datasets, features, cfg.beta, env.init,
                                        cfg.planner_cap, cfg.max_workers)
            cover.policies.append(result.mixture)
            cover.planned.append(True)
            cover.gammas.append(result.gamma)
            cover.traces.append(result.trace)
            if not result.converged:
                cover.incomplete = True
        else:
            uniform = Policy.uniform(env.state_counts[:h + 1], env.num_actions, label=f"uniform_{h}")
            cover.policies.append(MixturePolicy.of(uniform))
            cover.planned.append(False)
            cover.gammas.append(None)
            cover.traces.append([])
        logger.info(f"Explore 第 {h} 层完成: φ̂={phi_hat.label}, planned={cover.planned[-1]}")

    if cover.incomplete:
        logger.warning("Explore: 至少一层的椭圆规划未收敛，策略覆盖不完整")
    return cover


@dataclass
class MoffleResult:
    cover: PolicyCover
    datasets: List[LevelData]
    features: List[FeatureMap]
    reports: List[Dict[str, Any]]
    episodes: int


def _next_rewards(rewards: Sequence[RewardFunction], h: int, horizon: int) -> List[np.ndarray]:
    if h + 1 >= horizon:
        return []
    return [r.tables[h + 1] for r in rewards]


def moffle(env: EnvironmentAccess, features: FeatureClass, rewards: Sequence[RewardFunction],
           cfg: MoffleConfig, cover: Optional[PolicyCover] = None) -> MoffleResult:
    """Explore 之后用 G 类判别器学习 φ̄_h，并给出下游规划数据集"""
    cover = explore(env, features, cfg) if cover is None else cover
    phi_bar: List[FeatureMap] = []
    reports: List[Dict[str, Any]] = []
    datasets: List[LevelData] = []

    for h in range(env.horizon):
        env.collect_level(h, cover.data_policy(h), cfg.n_total)
        candidates = features.at(h)
        family = DiscriminatorFamily.g_class(features.next_level(h), _next_rewards(rewards, h, env.horizon),
                                             env.horizon, cfg.g_bound)
        data = env.dataset(h, cfg.n_phi_bar)
        if cfg.oracle == OracleMode.GREEDY:
            greedy_cfg = GreedyConfig(cfg.epsilon_apx, float(env.horizon), candidates[0].dim)
            chosen, report = greedy_select(candidates, family, data, greedy_cfg, cfg.search, cfg.max_workers)
        else:
            chosen, report = flo_minmaxmin(candidates, family, data, cfg.g_bound, float(env.horizon),
                                           cfg.search, cfg.max_workers)
        phi_bar.append(chosen)
        reports.append(report.to_dict())
        datasets.append(env.dataset(h, cfg.n_plan))
        logger.info(f"MOFFLE 第 {h} 层 φ̄={chosen.label}")

    return MoffleResult(cover, datasets, phi_bar, reports, env.episodes)


@dataclass
class DownstreamResult:
    policy: Policy
    value: Optional[float] = None
    optimal: Optional[float] = None

    @property
    def gap(self) -> Optional[float]:
        if self.value is None or self.optimal is None:
            return None
        return self.optimal - self.value


def plan_downstream(datasets: Sequence[LevelData], features: FeatureClass, reward: RewardFunction,
                    variant: FqiVariant, phi_bar: Optional[Sequence[FeatureMap]] = None,
                    bound: Optional[float] = None,
                    mdp: Optional[LatentLowRankMDP] = None) -> DownstreamResult:
    """REPRESENTATION 用 φ̄ 的单特征类，FULL_CLASS 用整个 Φ；给定 mdp 时附带精确值"""
    from mdp_core import exact_policy_value, value_iteration

    if variant == FqiVariant.REPRESENTATION:
        if phi_bar is None:
            raise ValueError("REPRESENTATION 规划需要学到的 φ̄")
        planning_class = features.restricted(phi_bar)
    else:
        planning_class = features
    result = fit_q(datasets, reward, variant, planning_class, bound=bound)
    downstream = DownstreamResult(result.policy)
    if mdp is not None:
        downstream.value = exact_policy_value(mdp, result.policy, reward)
        downstream.optimal = value_iteration(mdp, reward).value
    return downstream


@dataclass
class CoverageReport:
    levels: List[Dict[str, Any]]
    kappa_cfg_k: float
    latent_threshold: float
    ok: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "levels": self.levels,
            "kappa_cfg_k": self.kappa_cfg_k,
            "latent_threshold": self.latent_threshold,
            "ok": self.ok,
        }


def occupancy_ratio(mdp: LatentLowRankMDP, policy: AnyPolicy, level: int) -> Tuple[float, List[List[int]]]:
    """max_{x,a} max_π occ_π(x,a) / occ_ρ(x,a)，返回比值和未覆盖的 (x,a)"""
    occ = exact_state_action_occupancy(mdp, policy, level)
    worst = 0.0
    uncovered: List[List[int]] = []
    for x in range(mdp.num_states(level)):
        for a in range(mdp.num_actions):
            indicator = np.zeros_like(occ)
            indicator[x, a] = 1.0
            best, _ = max_expected_reward_at(mdp, level, indicator)
            if best <= 0:
                continue
            if occ[x, a] <= 0:
                uncovered.append([x, a])
                worst = math.inf
                continue
            worst = max(worst, best / occ[x, a])
    return worst, uncovered


def verify_cover(mdp: LatentLowRankMDP, cover: PolicyCover, cfg: MoffleConfig) -> CoverageReport:
    """精确检验覆盖：κ_emp·K、数据策略的潜变量覆盖、已规划 ρ_h 对 Z_{h+append} 的覆盖"""
    threshold = cfg.eta_min / (2.0 * cfg.kappa)
    kappa_k = cfg.kappa * cfg.num_actions
    levels: List[Dict[str, Any]] = []
    ok = True

    for h in range(mdp.horizon):
        data_policy = cover.data_policy(h)
        ratio, uncovered = occupancy_ratio(mdp, data_policy, h)
        entry: Dict[str, Any] = {
            "level": h,
            "kappa_emp_k": ratio,
            "uncovered": uncovered,
            "kappa_ok": bool(ratio <= kappa_k),
        }
        if h >= 1:
            latent = exact_latent_occupancy(mdp, data_policy, h)
            entry["latent_min"] = float(latent.min())
            entry["latent_ok"] = bool(latent.min() >= threshold)
            ok = ok and entry["latent_ok"]
        if cover.planned[h]:
            target = h + cover.append
            latent = exact_latent_occupancy(mdp, cover.rho(h, cover.lag), target)
            entry["planned_latent_level"] = target
            entry["planned_latent_min"] = float(latent.min())
            entry["planned_latent_ok"] = bool(latent.min() >= threshold)
            ok = ok and entry["planned_latent_ok"]
        if uncovered:
            logger.warning(f"第 {h} 层有 {len(uncovered)} 个可达 (x,a) 未被数据策略覆盖")
        levels.append(entry)

    return CoverageReport(levels, kappa_k, threshold, ok)


def exact_bellman_error(mdp: LatentLowRankMDP, policy: AnyPolicy, feature: FeatureMap,
                        values: np.ndarray, radius: float) -> float:
    """总体 Bellman 误差 min_{∥w∥≤B} E_ρ[(⟨φ,w⟩ − E[v(x')|x,a])²]"""
    h = feature.level
    occ = exact_state_action_occupancy(mdp, policy, h).ravel()
    backup = exact_bellman_backup(mdp, h, values).values.ravel()
    rows = feature.table.reshape(-1, feature.dim)
    return constrained_lsq(rows, backup, radius, sample_weight=occ).loss
