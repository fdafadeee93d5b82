import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional

import numpy as np

from config import parse_bool
from database import RunStore
from errors import ConfigError, MoffleError, StageError
from function_spaces import FeatureClass, FeatureMap, RewardFunction
from generators import EnvParams, generate_env, generate_feature_class, generate_rewards, parse_kinds
from mdp_core import LatentLowRankMDP, LevelData, TransitionDataset, exact_policy_value, value_iteration
from moffle_driver import (EnvironmentAccess, MoffleConfig, PolicyCover, explore, moffle, plan_downstream,
                           verify_cover)
from planners import FqiVariant
from storage import RunDirectory, load_json_file

logger = logging.getLogger(__name__)

VERSION = "0.1.0"
STAGES = ("gen-env", "gen-features", "explore", "learn", "plan", "eval", "verify", "e2e")
GAP_TOL = -1e-9


@dataclass
class ExperimentConfig:
    """扁平 key=value 配置的类型化视图"""
    settings: Dict[str, str]

    def __post_init__(self):
        self.settings = {k: str(v) for k, v in self.settings.items()}
        try:
            int(self.settings["seed"])
            decoys = int(self.settings["decoys"])
            rewards = int(self.settings["rewards"])
        except (KeyError, ValueError) as e:
            raise ConfigError(f"配置值无法解析: {e}") from e
        if decoys < 0:
            raise ConfigError(f"decoys 不能为负: {decoys}")
        if rewards < 1:
            raise ConfigError(f"rewards 必须 >= 1: {rewards}")
        if self.env_path:
            if not os.path.exists(self.env_path):
                raise ConfigError(f"环境文件不存在: {self.env_path}")
        else:
            EnvParams.from_settings(self.settings)

    @property
    def seed(self) -> int:
        return int(self.settings["seed"])

    @property
    def out(self) -> str:
        return self.settings["out"]

    @property
    def env_path(self) -> str:
        return self.settings.get("env_path", "").strip()

    @property
    def env_params(self) -> EnvParams:
        return EnvParams.from_settings(self.settings)

    @property
    def decoys(self) -> int:
        return int(self.settings["decoys"])

    @property
    def decoy_kinds(self) -> List[str]:
        return parse_kinds(self.settings.get("decoy_kinds", ""))

    @property
    def reward_count(self) -> int:
        return int(self.settings["rewards"])

    def flag(self, key: str) -> bool:
        return parse_bool(self.settings.get(key, "false"))

    def with_settings(self, **updates: Any) -> "ExperimentConfig":
        merged = dict(self.settings)
        merged.update({k: str(v) for k, v in updates.items()})
        return ExperimentConfig(merged)


@dataclass
class RunReport:
    stage: str
    seed: int
    versions: Dict[str, str] = field(default_factory=dict)
    phases: Dict[str, Any] = field(default_factory=dict)
    metrics: Dict[str, float] = field(default_factory=dict)
    gaps: Dict[str, float] = field(default_factory=dict)
    checks: List[Dict[str, Any]] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c["passed"] for c in self.checks) and all(g >= GAP_TOL for g in self.gaps.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "seed": self.seed,
            "versions": self.versions,
            "phases": self.phases,
            "metrics": self.metrics,
            "gaps": self.gaps,
            "checks": self.checks,
            "ok": self.ok,
            "wall_clock": self.wall_clock,
        }


def _versions() -> Dict[str, str]:
    import scipy

    return {"moffle": VERSION, "numpy": np.__version__, "scipy": scipy.__version__}


class ExperimentRunner:
    """按阶段执行流水线；运行目录中已有的产物直接读取，否则现场生成并保存"""

    def __init__(self, config: ExperimentConfig, store: Optional[RunStore] = None):
        self.config = config
        self.run_dir = RunDirectory(config.out)
        self.store = store
        self.run_id = os.path.basename(os.path.abspath(config.out))
        self.metrics: Dict[str, float] = {}
        self.phases: Dict[str, Any] = {}
        self.gaps: Dict[str, float] = {}
        self._env: Optional[LatentLowRankMDP] = None
        self._features: Optional[FeatureClass] = None
        self._rewards: Optional[List[RewardFunction]] = None
        self._access: Optional[EnvironmentAccess] = None
        self._cover: Optional[PolicyCover] = None
        self._phi_bar: Optional[List[FeatureMap]] = None
        self._datasets: Optional[List[LevelData]] = None
        self._policies: Optional[Dict[str, Any]] = None
        self._cfg: Optional[MoffleConfig] = None

    # ---------- 产物 ----------
    def env(self) -> LatentLowRankMDP:
        if self._env is None:
            if self.run_dir.exists("env.json"):
                self._env = self.run_dir.load_env()
            elif self.config.env_path:
                self._env = LatentLowRankMDP.from_dict(load_json_file(self.config.env_path))
                self.run_dir.save_env(self._env)
            else:
                self._env = generate_env(self.config.env_params, self.config.seed)
                self.run_dir.save_env(self._env)
            self.metrics["env_eta_min"] = self._env.eta_min
            self.metrics["env_dim"] = self._env.dim
        return self._env

    def features(self) -> FeatureClass:
        if self._features is None:
            if self.run_dir.exists("features", "sidecar.json"):
                self._features = self.run_dir.load_features()
            else:
                self._features = generate_feature_class(self.env(), self.config.decoys,
                                                        self.config.decoy_kinds, self.config.seed)
                self.run_dir.save_features(self._features)
        return self._features

    def rewards(self) -> List[RewardFunction]:
        if self._rewards is None:
            if self.run_dir.exists("rewards.json"):
                self._rewards = self.run_dir.load_rewards()
            else:
                self._rewards = generate_rewards(self.env(), self.config.reward_count, self.config.seed)
                self.run_dir.save_rewards(self._rewards)
        return self._rewards

    def moffle_config(self) -> MoffleConfig:
        if self._cfg is None:
            self._cfg = MoffleConfig.from_settings(self.config.settings, self.env())
            for key, value in self._cfg.summary().items():
                if isinstance(value, (int, float)) and not isinstance(value, bool):
                    self.metrics[f"cfg_{key}"] = value
        return self._cfg

    def access(self) -> EnvironmentAccess:
        if self._access is None:
            self._access = EnvironmentAccess(self.env(), self.config.seed, self.moffle_config().exact_data)
        return self._access

    def cover(self) -> PolicyCover:
        if self._cover is None:
            if self.run_dir.exists("cover.json"):
                self._cover = PolicyCover.from_dict(self.run_dir.load_cover())
            else:
                self._run_explore()
        return self._cover

    def _run_explore(self):
        cfg = self.moffle_config()
        cover = explore(self.access(), self.features(), cfg)
        self._cover = cover
        self.run_dir.save_cover(cover.to_dict())
        self.run_dir.save_report("explore", cover.reports)
        self.run_dir.save_learned(cover.features, "phi_hat")
        self.run_dir.write_trace([row for trace in cover.traces for row in trace])
        for h, report in enumerate(cover.reports):
            self.metrics[f"explore_objective_{h}"] = report["objective"]
            self.metrics[f"explore_chosen_{h}"] = report["chosen_index"]
            self.metrics[f"planner_iterations_{h}"] = len(cover.traces[h])
        self.metrics["cover_incomplete"] = cover.incomplete
        self.phases["explore"] = {"incomplete": cover.incomplete, "planned": cover.planned}

    def learned(self) -> List[FeatureMap]:
        if self._phi_bar is None:
            if self.run_dir.exists("learned", "phi_bar.json") and self.run_dir.exists("datasets"):
                self._phi_bar = self.run_dir.load_learned("phi_bar")
                self._datasets = self.run_dir.load_datasets()
            else:
                self._run_learn()
        return self._phi_bar

    def _run_learn(self):
        cfg = self.moffle_config()
        result = moffle(self.access(), self.features(), self.rewards(), cfg, cover=self.cover())
        self._phi_bar = result.features
        self._datasets = self.access().level_data()
        self.run_dir.save_learned(result.features, "phi_bar")
        self.run_dir.save_datasets(self._datasets)
        self.run_dir.save_report("learn", result.reports)
        star_index = self.features().star_index
        for h, report in enumerate(result.reports):
            self.metrics[f"learn_objective_{h}"] = report["objective"]
            self.metrics[f"learn_chosen_{h}"] = report["chosen_index"]
            if star_index is not None:
                self.metrics[f"learn_is_star_{h}"] = report["chosen_index"] == star_index[h]
        self.metrics["episodes"] = result.episodes
        self.phases["learn"] = {"chosen": [r["chosen_label"] for r in result.reports]}

    def planning_datasets(self) -> List[LevelData]:
        self.learned()
        n_plan = self.moffle_config().n_plan
        return [d.head(n_plan) if isinstance(d, TransitionDataset) else d for d in self._datasets]

    # ---------- 阶段 ----------
    def plan(self) -> Dict[str, Any]:
        cfg = self.moffle_config()
        variant = cfg.downstream_variant
        phi_bar = self.learned()
        datasets = self.planning_datasets()
        policies = {}
        for i, reward in enumerate(self.rewards()):
            result = plan_downstream(datasets, self.features(), reward, variant, phi_bar=phi_bar,
                                     bound=cfg.g_bound if variant == FqiVariant.REPRESENTATION else None)
            name = f"downstream_{i}"
            self.run_dir.save_policy(result.policy, name)
            policies[name] = result.policy
        self._policies = policies
        self.phases["plan"] = {"variant": variant.value, "policies": sorted(policies)}
        logger.info(f"下游规划完成: variant={variant.value}, policies={len(policies)}")
        return policies

    def evaluate(self) -> Dict[str, float]:
        env = self.env()
        gaps = {}
        for i, reward in enumerate(self.rewards()):
            name = f"downstream_{i}"
            if self._policies is not None and name in self._policies:
                policy = self._policies[name]
            elif self.run_dir.exists("policies", f"{name}.json"):
                policy = self.run_dir.load_policy(name)
            else:
                policy = self.plan()[name]
            value = exact_policy_value(env, policy, reward)
            optimal = value_iteration(env, reward).value
            gaps[reward.label] = optimal - value
            self.metrics[f"value_{i}"] = value
            self.metrics[f"optimal_{i}"] = optimal
            self.metrics[f"gap_{i}"] = optimal - value
            if optimal - value < GAP_TOL:
                logger.error(f"策略价值超过最优值: {reward.label}, gap={optimal - value:.3g}")
        self.gaps.update(gaps)
        return gaps

    def coverage(self) -> Dict[str, Any]:
        report = verify_cover(self.env(), self.cover(), self.moffle_config())
        self.run_dir.save_report("coverage", report.to_dict())
        for entry in report.levels:
            h = entry["level"]
            self.metrics[f"kappa_emp_k_{h}"] = entry["kappa_emp_k"]
            if "latent_min" in entry:
                self.metrics[f"latent_min_{h}"] = entry["latent_min"]
            if "planned_latent_min" in entry:
                self.metrics[f"planned_latent_min_{h}"] = entry["planned_latent_min"]
        self.metrics["coverage_ok"] = report.ok
        return report.to_dict()


def _execute(runner: ExperimentRunner, stage: str, checks: List[Dict[str, Any]]):
    from verification import run_checks, check_end_to_end

    if stage == "gen-env":
        runner.env()
    elif stage == "gen-features":
        runner.features()
        runner.rewards()
    elif stage == "explore":
        runner.cover()
        runner.metrics.setdefault("episodes", runner.access().episodes)
    elif stage == "learn":
        runner.learned()
    elif stage == "plan":
        runner.plan()
    elif stage == "eval":
        runner.evaluate()
    elif stage == "verify":
        checks.extend(c.to_dict() for c in run_checks(runner))
    elif stage == "e2e":
        runner.env()
        runner.features()
        runner.rewards()
        runner.cover()
        runner.learned()
        runner.plan()
        runner.evaluate()
        if runner.config.flag("verify_coverage") or runner.config.flag("verify_downstream"):
            checks.append(check_end_to_end(runner).to_dict())
    else:
        raise ConfigError(f"未知阶段: {stage}")


def run(config: ExperimentConfig, stage: str = "e2e", store: Optional[RunStore] = None) -> RunReport:
    """执行一个阶段，写出 report.json 与 metrics.csv；内部错误包装为 StageError"""
    if stage not in STAGES:
        raise ConfigError(f"未知阶段: {stage}（可选 {', '.join(STAGES)}）")
    started = time.time()
    runner = ExperimentRunner(config, store)
    if store is not None:
        store.get_or_create_run(runner.run_id, config.out, config.seed, config.settings)
        store.add_stage(runner.run_id, stage, "started")
    logger.info(f"阶段开始: {stage}, out={config.out}, seed={config.seed}")

    checks: List[Dict[str, Any]] = []
    try:
        _execute(runner, stage, checks)
    except MoffleError as e:
        if store is not None:
            store.add_stage(runner.run_id, stage, "failed", str(e))
        if isinstance(e, (StageError, ConfigError)):
            raise
        raise StageError(stage, str(e)) from e

    report = RunReport(
        stage=stage,
        seed=config.seed,
        versions=_versions(),
        phases=runner.phases,
        metrics=dict(runner.metrics),
        gaps=runner.gaps,
        checks=checks,
        wall_clock=time.time() - started,
    )
    runner.run_dir.save_report(f"run_{stage}", report.to_dict())
    runner.run_dir.write_metrics(runner.metrics)
    if stage == "e2e":
        runner.run_dir.save_json(report.to_dict(), "report.json")
    if store is not None:
        store.record_metrics(runner.run_id, {k: float(v) for k, v in runner.metrics.items()})
        store.add_stage(runner.run_id, stage, "ok" if report.ok else "failed",
                        metadata={"checks": [c["name"] for c in checks if not c["passed"]]})
    logger.info(f"阶段结束: {stage}, ok={report.ok}, 用时 {report.wall_clock:.1f}s")
    return report
