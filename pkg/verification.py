"""可运行的验收检查：每项检查返回 CheckResult，由 verify 阶段汇总"""
import filecmp
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from function_spaces import FeatureMap, RewardFunction, feature_design
from generators import generate_env, generate_feature_class, generate_rewards
from mdp_core import (TransitionDataset, collect_dataset, exact_bellman_backup, exact_policy_value,
                      exact_state_action_occupancy, exact_weighted_transitions, make_stream,
                      max_expected_reward_at, uniform_policy, value_iteration)
from moffle_driver import exact_bellman_error
from planners import FqiVariant, elliptical_bonus, elliptical_iteration_bound, elliptical_planner, fit_q, fqe
from regression import RidgeConfig, constrained_lsq, empirical_loss, residual_operator, ridge_solve, sym_quad_max
from rep_learning import DiscriminatorFamily, GreedyConfig, flo_eigen, greedy_select

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: Dict[str, Any] = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "passed": bool(self.passed), "details": self.details,
                "wall_clock": self.wall_clock}


def _timed(name: str, fn: Callable[[], Dict[str, Any]]) -> CheckResult:
    started = time.time()
    details = fn()
    passed = bool(details.pop("passed"))
    result = CheckResult(name, passed, details, time.time() - started)
    if passed:
        logger.info(f"检查通过: {name} ({result.wall_clock:.1f}s)")
    else:
        logger.warning(f"检查失败: {name}, details={details}")
    return result


def _ball_points(rng: np.random.Generator, count: int, dim: int, radius: float) -> np.ndarray:
    directions = rng.standard_normal((count, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * radius * rng.random((count, 1)) ** (1.0 / dim)


def _unit_rows(rng: np.random.Generator, shape) -> np.ndarray:
    rows = rng.standard_normal(shape)
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return rows / np.maximum(norms, 1.0) * rng.random(shape[:-1] + (1,))


# ---------- 1-2: 低秩结构 ----------
def check_linearity(mdp, seed: int) -> Dict[str, Any]:
    rng = make_stream(seed, "check", "linearity")
    worst, worst_norm = 0.0, 0.0
    for h in range(mdp.horizon):
        for _ in range(100):
            f = rng.random(mdp.num_states(h + 1))
            backup = exact_bellman_backup(mdp, h, f)
            worst = max(worst, float(np.abs(backup.values - mdp.phi_star(h) @ backup.theta).max()))
            worst_norm = max(worst_norm, float(np.linalg.norm(backup.theta)))
    return {"passed": worst < 1e-10 and worst_norm <= math.sqrt(mdp.dim) + 1e-12,
            "max_error": worst, "max_theta_norm": worst_norm}


def check_norms(mdp, seed: int) -> Dict[str, Any]:
    rng = make_stream(seed, "check", "norms")
    phi_norm = max(float(np.linalg.norm(mdp.phi_star(h), axis=2).max()) for h in range(mdp.horizon))
    mu_norm = 0.0
    for h in range(mdp.horizon):
        g = rng.random((100, mdp.num_states(h + 1)))
        mu_norm = max(mu_norm, float(np.linalg.norm(g @ mdp.mu_star(h), axis=1).max()))
    return {"passed": phi_norm <= 1.0 + 1e-12 and mu_norm <= math.sqrt(mdp.dim) + 1e-12,
            "max_phi_norm": phi_norm, "max_mu_norm": mu_norm}


# ---------- 3: 回归核 ----------
def _sphere_grid(dim: int, radius: float) -> np.ndarray:
    if dim == 2:
        angles = np.linspace(0.0, 2.0 * np.pi, 20000, endpoint=False)
        return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    polar = np.linspace(0.0, np.pi, 400)
    azimuth = np.linspace(0.0, 2.0 * np.pi, 800, endpoint=False)
    p, a = np.meshgrid(polar, azimuth, indexing="ij")
    points = np.stack([np.sin(p) * np.cos(a), np.sin(p) * np.sin(a), np.cos(p)], axis=-1)
    return radius * points.reshape(-1, 3)


def check_regression(seed: int) -> Dict[str, Any]:
    rng = make_stream(seed, "check", "regression")
    lsq_ok = True
    for _ in range(50):
        X = _unit_rows(rng, (20, 3))
        y = rng.normal(size=20)
        radius = float(rng.uniform(0.1, 2.0))
        result = constrained_lsq(X, y, radius)
        candidates = _ball_points(rng, 10000, 3, radius)
        losses = ((X @ candidates.T - y[:, None]) ** 2).mean(axis=0)
        lsq_ok &= result.loss <= losses.min() + 1e-9
        lsq_ok &= np.linalg.norm(result.weight) <= radius * (1.0 + 1e-9)

    quad_ok = True
    for dim in (2, 3):
        for _ in range(5):
            M = rng.normal(size=(dim, dim))
            radius = float(rng.uniform(0.5, 2.0))
            value = sym_quad_max(M, radius).value
            grid = _sphere_grid(dim, radius)
            brute = max(0.0, float(np.einsum("kd,de,ke->k", grid, (M + M.T) / 2.0, grid).max()))
            quad_ok &= abs(value - brute) <= 1e-3 * max(abs(value), 1e-12)

    identity_error = 0.0
    for _ in range(10):
        X = _unit_rows(rng, (15, 3))
        y = rng.normal(size=15)
        lam = float(rng.uniform(0.1, 1.0))
        residual = residual_operator(X, lam) @ y
        w = ridge_solve(X, y, lam)
        identity_error = max(identity_error, float(np.abs(residual - (y - X @ w)).max()),
                             abs(float(np.mean(residual ** 2)) - empirical_loss(X, w, y).mean))
    return {"passed": bool(lsq_ok and quad_ok and identity_error < 1e-10),
            "lsq_ok": bool(lsq_ok), "quad_ok": bool(quad_ok), "identity_error": identity_error}


# ---------- 4: 特征向量归约 ----------
def _brute_triple(samples: TransitionDataset, phi: FeatureMap, phi_tilde: FeatureMap,
                  next_feature: FeatureMap, lam: float) -> float:
    radius = math.sqrt(next_feature.dim)
    angles = np.linspace(0.0, 2.0 * np.pi, 20000, endpoint=False)
    thetas = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    targets = (thetas @ next_feature.action_mean.T)[:, samples.next_states]
    own = residual_operator(phi.rows(samples.states, samples.actions), lam)
    other = residual_operator(phi_tilde.rows(samples.states, samples.actions), lam)
    values = np.mean((targets @ own.T) ** 2, axis=1) - np.mean((targets @ other.T) ** 2, axis=1)
    return max(0.0, float(values.max()))


def check_eigen(mdp, features, seed: int) -> Dict[str, Any]:
    from rep_learning import eigen_triple_value

    rng = make_stream(seed, "check", "eigen")
    worst = 0.0
    for i in range(20):
        phi = FeatureMap(0, _unit_rows(rng, (6, 2, 2)), label=f"phi_{i}")
        phi_tilde = FeatureMap(0, _unit_rows(rng, (6, 2, 2)), label=f"tilde_{i}")
        nxt = FeatureMap(1, _unit_rows(rng, (5, 2, 2)), label=f"next_{i}")
        samples = TransitionDataset(0, rng.integers(6, size=30), rng.integers(2, size=30),
                                    rng.integers(5, size=30))
        ridge = RidgeConfig(float(rng.uniform(0.2, 1.0)))
        weighted = samples.weighted
        value = eigen_triple_value(feature_design(phi, weighted, 5), feature_design(phi_tilde, weighted, 5),
                                   nxt, ridge).value
        brute = _brute_triple(samples, phi, phi_tilde, nxt, ridge.lam)
        worst = max(worst, abs(value - brute) / max(abs(brute), 1e-12) if brute > 1e-12 else abs(value))

    star = features.star(0)
    zero = FeatureMap(0, np.zeros_like(star.table), label="zero")
    data = exact_weighted_transitions(mdp, uniform_policy(mdp, 0), 0)
    chosen, _ = flo_eigen([zero, star], features.next_level(0), data, RidgeConfig.from_radius(math.sqrt(mdp.dim)))
    return {"passed": worst <= 1e-3 and chosen is star, "max_relative_error": worst,
            "selected": chosen.label}


# ---------- 5: 迭代贪心 ----------
def check_greedy(mdp, features, seed: int, budget, n: int = 10000, epsilon_tol: float = 0.05) -> Dict[str, Any]:
    rng = make_stream(seed, "check", "greedy")
    policy = uniform_policy(mdp)
    details: Dict[str, Any] = {"levels": []}
    passed = True
    for h in range(mdp.horizon):
        data = collect_dataset(mdp, policy, h, n, make_stream(seed, "check", "greedy_data", h))
        cfg = GreedyConfig(epsilon_tol, 1.0, features.at(h)[0].dim)
        family = DiscriminatorFamily.f_class(features.next_level(h), 1.0)
        chosen, report = greedy_select(features.at(h), family, data, cfg, budget)

        worst = 0.0
        members = family.members()
        for _ in range(200):
            nxt, _ = members[int(rng.integers(len(members)))]
            theta = _ball_points(rng, 1, nxt.dim, family.radius_for(nxt))[0]
            values = family.make(nxt, None, theta=theta).values()
            worst = max(worst, exact_bellman_error(mdp, policy, chosen, values, cfg.fit_radius))
        ok = report.termination == "converged" and report.iterations <= cfg.max_iterations \
            and worst <= 2.0 * epsilon_tol
        passed = passed and ok
        details["levels"].append({"level": h, "iterations": report.iterations, "cap": cfg.max_iterations,
                                  "chosen": chosen.label, "bellman_error": worst})
    details["passed"] = passed
    return details


# ---------- 6: 椭圆规划 ----------
def check_elliptical(mdp, features, seed: int, beta: float = 0.4, n: int = 5000) -> Dict[str, Any]:
    policy = uniform_policy(mdp)
    datasets = [collect_dataset(mdp, policy, h, n, make_stream(seed, "check", "elliptical", h))
                for h in range(mdp.horizon)]
    bound = elliptical_iteration_bound(mdp.dim, beta)
    details: Dict[str, Any] = {"levels": [], "bound": bound}
    passed = True
    for h in range(mdp.horizon):
        star = features.star(h)
        result = elliptical_planner(h, star, datasets, features, beta, mdp.init, max_iterations=bound)
        coverage, _ = max_expected_reward_at(mdp, h, elliptical_bonus(star, result.gamma))

        last = result.mixture.members[-1]
        bonus = RewardFunction.at_level(mdp.state_counts[:h + 1], mdp.num_actions, h,
                                        elliptical_bonus(star, np.eye(mdp.dim)))
        estimate = fqe(datasets[:h + 1], bonus, last, features, mdp.init)
        exact = float(np.sum(exact_state_action_occupancy(mdp, last, h) * bonus.tables[h]))
        ok = result.converged and result.iterations <= bound and coverage <= 2.0 * beta \
            and abs(estimate - exact) <= 0.05
        passed = passed and ok
        details["levels"].append({"level": h, "iterations": result.iterations, "coverage": coverage,
                                  "fqe_error": abs(estimate - exact)})
    details["passed"] = passed
    return details


# ---------- 7: 端到端 ----------
def check_end_to_end(runner) -> CheckResult:
    def body() -> Dict[str, Any]:
        details: Dict[str, Any] = {}
        passed = True
        if runner.config.flag("verify_coverage"):
            coverage = runner.coverage()
            details["coverage_ok"] = coverage["ok"]
            passed = passed and coverage["ok"]
        if runner.config.flag("verify_downstream"):
            gaps = runner.gaps or runner.evaluate()
            tolerance = 0.15 * runner.env().horizon
            details["gaps"] = gaps
            details["tolerance"] = tolerance
            passed = passed and all(g <= tolerance for g in gaps.values())
        details["passed"] = passed
        return details

    return _timed("end_to_end", body)


# ---------- 8: 精确数据下的 FQI ----------
def check_fqi_exact(params, decoys: int, kinds: Sequence[str], seed: int, count: int = 10) -> Dict[str, Any]:
    worst = 0.0
    for i in range(count):
        mdp = generate_env(params, seed + 1000 + i)
        features = generate_feature_class(mdp, decoys, kinds, seed + 1000 + i)
        reward = generate_rewards(mdp, 1, seed + 1000 + i)[0]
        datasets = [exact_weighted_transitions(mdp, uniform_policy(mdp, h), h) for h in range(mdp.horizon)]
        policy = fit_q(datasets, reward, FqiVariant.FULL_CLASS, features).policy
        worst = max(worst, abs(value_iteration(mdp, reward).value - exact_policy_value(mdp, policy, reward)))
    return {"passed": worst <= 1e-8, "max_value_error": worst}


# ---------- 9: 可复现性 ----------
def check_determinism(config) -> Dict[str, Any]:
    from harness import run

    paths = []
    for name in ("run_a", "run_b"):
        out = os.path.join(config.out, "determinism", name)
        sub = config.with_settings(out=out, verify_determinism="false", verify_coverage="false",
                                   verify_downstream="false")
        run(sub, "e2e")
        paths.append(os.path.join(out, "metrics.csv"))
    same = filecmp.cmp(paths[0], paths[1], shallow=False)
    return {"passed": same, "metrics": paths}


def run_checks(runner, names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """按名称运行验收检查；names 为空时运行全部已启用的检查"""
    config = runner.config
    seed = config.seed
    mdp = runner.env()
    features = runner.features()
    budget = runner.moffle_config().search
    checks: Dict[str, Callable[[], Dict[str, Any]]] = {
        "linearity": lambda: check_linearity(mdp, seed),
        "norms": lambda: check_norms(mdp, seed),
        "regression": lambda: check_regression(seed),
        "eigen": lambda: check_eigen(mdp, features, seed),
        "greedy": lambda: check_greedy(mdp, features, seed, budget),
        "elliptical": lambda: check_elliptical(mdp, features, seed),
        "fqi_exact": lambda: check_fqi_exact(config.env_params, config.decoys, config.decoy_kinds, seed),
    }
    if config.flag("verify_determinism"):
        checks["determinism"] = lambda: check_determinism(config)

    selected = list(names) if names else list(checks)
    results = [_timed(name, checks[name]) for name in selected if name in checks]
    if not names or "end_to_end" in names:
        if config.flag("verify_coverage") or config.flag("verify_downstream"):
            runner.cover()
            runner.learned()
            runner.plan()
            runner.evaluate()
            results.append(check_end_to_end(runner))
    return results
