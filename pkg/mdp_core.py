import logging
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from config import STOCHASTIC_TOL
from errors import (EmptyDataset, LevelMismatch, NonStochasticRow, PolicyHorizonMismatch,
                    RewardOutOfRange, ShapeMismatch)

logger = logging.getLogger(__name__)


def _readonly(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _tag_key(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def make_stream(seed: int, *tags) -> np.random.Generator:
    """由主种子和标签派生计数器型随机流（Philox）"""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_tag_key(t) for t in tags))
    return np.random.Generator(np.random.Philox(seq))


def _check_stochastic(name: str, table: np.ndarray):
    if np.any(table < -STOCHASTIC_TOL):
        raise NonStochasticRow(f"{name} 存在负概率")
    sums = table.sum(axis=-1)
    bad = np.abs(sums - 1.0) > STOCHASTIC_TOL
    if np.any(bad):
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonStochasticRow(f"{name} 第 {index} 行之和为 {sums[index]:.12g}")


def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """按行逆CDF采样，probs 形状 (n, k)"""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


# ==================== 环境 ====================

@dataclass(frozen=True, eq=False)
class LatentLowRankMDP:
    """由潜变量分解 (ψ, ν) 构造的有限状态分幕低秩MDP

    psi[h]: (|X_h|, K, d)，即 φ*_h；nu[h]: (d, |X_{h+1}|)，其转置为 μ*_h；
    transitions[h]: (|X_h|, K, |X_{h+1}|)。
    """
    horizon: int
    num_actions: int
    psi: Tuple[np.ndarray, ...]
    nu: Tuple[np.ndarray, ...]
    init: np.ndarray
    transitions: Tuple[np.ndarray, ...] = field(repr=False)
    eta_min: float

    @property
    def dim(self) -> int:
        return int(self.psi[0].shape[2])

    @property
    def state_counts(self) -> Tuple[int, ...]:
        return tuple(int(p.shape[0]) for p in self.psi) + (int(self.nu[-1].shape[1]),)

    def num_states(self, h: int) -> int:
        return self.state_counts[h]

    def phi_star(self, h: int) -> np.ndarray:
        return self.psi[h]

    def mu_star(self, h: int) -> np.ndarray:
        return self.nu[h].T

    def to_dict(self) -> Dict[str, Any]:
        return {
            "H": self.horizon,
            "K": self.num_actions,
            "sizes": list(self.state_counts),
            "d": self.dim,
            "psi": [p.tolist() for p in self.psi],
            "nu": [n.tolist() for n in self.nu],
            "init": self.init.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LatentLowRankMDP":
        return build_from_latent(
            psi=[np.asarray(p, dtype=float) for p in data["psi"]],
            nu=[np.asarray(n, dtype=float) for n in data["nu"]],
            init=np.asarray(data["init"], dtype=float),
            horizon=int(data["H"]),
            num_actions=int(data["K"]),
        )


def _backward_max(transitions: Sequence[np.ndarray], init: np.ndarray, level: int,
                  table: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """max_π E_π[table(x_level, a_level)]，返回最优值和 0..level 层的贪心动作"""
    q = np.asarray(table, dtype=float)
    actions = [None] * (level + 1)
    actions[level] = np.argmax(q, axis=1)
    v = q.max(axis=1)
    for h in range(level - 1, -1, -1):
        q = transitions[h] @ v
        actions[h] = np.argmax(q, axis=1)
        v = q.max(axis=1)
    return float(init @ v), actions


def _compute_eta_min(psi, transitions, init) -> float:
    eta = np.inf
    for h, table in enumerate(psi):
        for z in range(table.shape[2]):
            value, _ = _backward_max(transitions, init, h, table[:, :, z])
            eta = min(eta, value)
    return float(eta)


def build_from_latent(psi: Sequence[np.ndarray], nu: Sequence[np.ndarray], init: np.ndarray,
                      horizon: int, num_actions: int) -> LatentLowRankMDP:
    """由 (ψ, ν, 初始分布) 构造MDP，推导 T、φ*、μ* 并精确计算 η_min"""
    if len(psi) != horizon or len(nu) != horizon:
        raise ShapeMismatch(f"psi/nu 层数应为 H={horizon}，实际 {len(psi)}/{len(nu)}")
    psi = [np.asarray(p, dtype=float) for p in psi]
    nu = [np.asarray(n, dtype=float) for n in nu]
    init = np.asarray(init, dtype=float)

    dim = psi[0].shape[-1] if psi[0].ndim == 3 else None
    for h in range(horizon):
        if psi[h].ndim != 3 or psi[h].shape[1] != num_actions or psi[h].shape[2] != dim:
            raise ShapeMismatch(f"psi[{h}] 形状应为 (|X_h|, {num_actions}, {dim})，实际 {psi[h].shape}")
        if nu[h].ndim != 2 or nu[h].shape[0] != dim:
            raise ShapeMismatch(f"nu[{h}] 形状应为 ({dim}, |X_h+1|)，实际 {nu[h].shape}")
        if h + 1 < horizon and nu[h].shape[1] != psi[h + 1].shape[0]:
            raise ShapeMismatch(f"nu[{h}] 的后继状态数与 psi[{h + 1}] 不一致")
    if init.shape != (psi[0].shape[0],):
        raise ShapeMismatch(f"初始分布形状应为 ({psi[0].shape[0]},)，实际 {init.shape}")

    _check_stochastic("init", init[None, :])
    for h in range(horizon):
        _check_stochastic(f"psi[{h}]", psi[h])
        _check_stochastic(f"nu[{h}]", nu[h])

    transitions = [np.einsum("xad,dy->xay", psi[h], nu[h]) for h in range(horizon)]
    eta_min = _compute_eta_min(psi, transitions, init)
    logger.debug(f"构造低秩MDP: H={horizon}, K={num_actions}, d={dim}, "
                 f"|X|={[p.shape[0] for p in psi] + [nu[-1].shape[1]]}, eta_min={eta_min:.4g}")

    return LatentLowRankMDP(
        horizon=horizon,
        num_actions=num_actions,
        psi=tuple(_readonly(p) for p in psi),
        nu=tuple(_readonly(n) for n in nu),
        init=_readonly(init),
        transitions=tuple(_readonly(t) for t in transitions),
        eta_min=eta_min,
    )


# ==================== 策略 ====================

@dataclass(frozen=True, eq=False)
class Policy:
    """非平稳策略：每层一张 (|X_h|, K) 的动作概率表，覆盖 0..last_level 层"""
    probs: Tuple[np.ndarray, ...]
    label: str = "policy"

    def __post_init__(self):
        tables = tuple(_readonly(p) for p in self.probs)
        for h, table in enumerate(tables):
            if table.ndim != 2:
                raise ShapeMismatch(f"策略第 {h} 层应为二维表")
            _check_stochastic(f"policy[{h}]", table)
        object.__setattr__(self, "probs", tables)

    @classmethod
    def deterministic(cls, actions: Sequence[Sequence[int]], num_actions: int,
                      label: str = "deterministic") -> "Policy":
        tables = []
        for h, row in enumerate(actions):
            row = np.asarray(row, dtype=int)
            if np.any(row < 0) or np.any(row >= num_actions):
                raise ShapeMismatch(f"第 {h} 层动作编号越界 (K={num_actions})")
            table = np.zeros((row.shape[0], num_actions))
            table[np.arange(row.shape[0]), row] = 1.0
            tables.append(table)
        return cls(tuple(tables), label)

    @classmethod
    def uniform(cls, state_counts: Sequence[int], num_actions: int, label: str = "uniform") -> "Policy":
        return cls(tuple(np.full((n, num_actions), 1.0 / num_actions) for n in state_counts), label)

    @property
    def last_level(self) -> int:
        return len(self.probs) - 1

    @property
    def num_actions(self) -> int:
        return int(self.probs[0].shape[1]) if self.probs else 0

    @property
    def is_deterministic(self) -> bool:
        return all(np.all((t == 0.0) | (t == 1.0)) for t in self.probs)

    def action_probs(self, h: int) -> np.ndarray:
        return self.probs[h]

    def actions(self, h: int) -> np.ndarray:
        return np.argmax(self.probs[h], axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "policy", "label": self.label, "probs": [t.tolist() for t in self.probs]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Policy":
        return cls(tuple(np.asarray(t, dtype=float) for t in data["probs"]), data.get("label", "policy"))


@dataclass(frozen=True, eq=False)
class MixturePolicy:
    """ρ_j^{+i}：每幕均匀抽取一个成员执行 a_0..a_j，之后 i 步均匀动作

    last_level 可以为负：此时 a_0..a_{j+i} 全部均匀。
    """
    members: Tuple[Policy, ...]
    last_level: int
    extra: int = 0
    label: str = "mixture"

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if self.extra < 0:
            raise ValueError(f"附加均匀动作数不能为负: {self.extra}")
        if self.last_level >= 0 and not self.members:
            raise ValueError("last_level >= 0 的混合策略至少需要一个成员")
        for member in self.members:
            if member.last_level < self.last_level:
                raise PolicyHorizonMismatch(
                    f"成员策略 {member.label} 只覆盖到第 {member.last_level} 层，需要 {self.last_level}")

    @classmethod
    def of(cls, policy: Policy) -> "MixturePolicy":
        return cls((policy,), policy.last_level, 0, policy.label)

    @classmethod
    def uniform_prefix(cls, last_level: int, extra: int) -> "MixturePolicy":
        return cls((), last_level, extra, f"uniform[{last_level}+{extra}]")

    @property
    def last_action(self) -> int:
        """最后一个被指定的动作下标 a_{j+i}"""
        return self.last_level + self.extra

    def with_extra(self, extra: int) -> "MixturePolicy":
        return MixturePolicy(self.members, self.last_level, extra, self.label)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "mixture",
            "label": self.label,
            "last_level": self.last_level,
            "extra": self.extra,
            "members": [m.to_dict() for m in self.members],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MixturePolicy":
        return cls(tuple(Policy.from_dict(m) for m in data["members"]),
                   int(data["last_level"]), int(data["extra"]), data.get("label", "mixture"))


AnyPolicy = Union[Policy, MixturePolicy]


def as_mixture(policy: AnyPolicy) -> MixturePolicy:
    return policy if isinstance(policy, MixturePolicy) else MixturePolicy.of(policy)


def policy_from_dict(data: Mapping[str, Any]) -> AnyPolicy:
    if not isinstance(data, Mapping):
        raise ShapeMismatch(f"策略文件应为 JSON 对象，实际为 {type(data).__name__}")
    if data.get("kind") == "mixture":
        return MixturePolicy.from_dict(data)
    return Policy.from_dict(data)


def uniform_policy(mdp: LatentLowRankMDP, last_level: Optional[int] = None) -> Policy:
    last_level = mdp.horizon - 1 if last_level is None else last_level
    return Policy.uniform(mdp.state_counts[:last_level + 1], mdp.num_actions)


def _level_probs(mdp: LatentLowRankMDP, member: Optional[Policy], mixture: MixturePolicy, h: int) -> np.ndarray:
    if member is not None and h <= mixture.last_level:
        return member.probs[h]
    return np.full((mdp.num_states(h), mdp.num_actions), 1.0 / mdp.num_actions)


# ==================== 精确占用度 ====================

def _occupancies(mdp: LatentLowRankMDP, policy: AnyPolicy, upto: int) -> List[np.ndarray]:
    mixture = as_mixture(policy)
    if mixture.last_action < upto:
        raise PolicyHorizonMismatch(f"策略只指定到 a_{mixture.last_action}，需要 a_{upto}")
    components = mixture.members or (None,)
    totals = [np.zeros((mdp.num_states(h), mdp.num_actions)) for h in range(upto + 1)]
    for member in components:
        dist = np.asarray(mdp.init)
        for h in range(upto + 1):
            sa = dist[:, None] * _level_probs(mdp, member, mixture, h)
            totals[h] += sa / len(components)
            if h < upto:
                dist = np.einsum("xa,xay->y", sa, mdp.transitions[h])
    return totals


def exact_state_action_occupancy(mdp: LatentLowRankMDP, policy: AnyPolicy, h: int) -> np.ndarray:
    """前向DP得到 (x_h, a_h) 的精确分布"""
    if not 0 <= h < mdp.horizon:
        raise LevelMismatch(f"层号 {h} 超出 [0, {mdp.horizon})")
    return _occupancies(mdp, policy, h)[h]


def exact_state_occupancy(mdp: LatentLowRankMDP, policy: AnyPolicy, h: int) -> np.ndarray:
    if h == 0:
        return np.array(mdp.init)
    sa = exact_state_action_occupancy(mdp, policy, h - 1)
    return np.einsum("xa,xay->y", sa, mdp.transitions[h - 1])


def exact_latent_occupancy(mdp: LatentLowRankMDP, policy: AnyPolicy, level: int) -> np.ndarray:
    """z_level 的精确分布，level = h+1 ∈ [1, H]，经由 ψ_h 传播"""
    if not 1 <= level <= mdp.horizon:
        raise LevelMismatch(f"潜变量层号 {level} 超出 [1, {mdp.horizon}]")
    sa = exact_state_action_occupancy(mdp, policy, level - 1)
    return np.einsum("xa,xaz->z", sa, mdp.psi[level - 1])


def max_expected_reward_at(mdp: LatentLowRankMDP, level: int, table: np.ndarray) -> Tuple[float, Policy]:
    """max_π E_π[table(x_level, a_level)] 及达到最优的确定性策略"""
    value, actions = _backward_max(mdp.transitions, mdp.init, level, table)
    return value, Policy.deterministic(actions, mdp.num_actions, label=f"argmax@{level}")


# ==================== 采样 ====================

@dataclass(frozen=True)
class Trajectory:
    states: Tuple[int, ...]
    actions: Tuple[int, ...]
    latents: Optional[Tuple[int, ...]] = None


def _rollout(mdp: LatentLowRankMDP, policy: AnyPolicy, n: int, last_level: int,
             rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """并行模拟 n 个独立片段直到 x_{last_level+1}"""
    mixture = as_mixture(policy)
    if mixture.last_action < last_level:
        raise PolicyHorizonMismatch(f"策略只指定到 a_{mixture.last_action}，采样需要 a_{last_level}")

    states = np.zeros((n, last_level + 2), dtype=np.int64)
    actions = np.zeros((n, last_level + 1), dtype=np.int64)
    latents = np.zeros((n, last_level + 1), dtype=np.int64)

    states[:, 0] = _sample_categorical(np.broadcast_to(mdp.init, (n, mdp.init.shape[0])), rng)
    member_idx = rng.integers(len(mixture.members), size=n) if mixture.members else None

    for h in range(last_level + 1):
        x = states[:, h]
        if member_idx is not None and h <= mixture.last_level:
            stacked = np.stack([m.probs[h] for m in mixture.members])
            probs = stacked[member_idx, x]
        else:
            probs = np.full((n, mdp.num_actions), 1.0 / mdp.num_actions)
        a = _sample_categorical(probs, rng)
        z = _sample_categorical(mdp.psi[h][x, a], rng)
        states[:, h + 1] = _sample_categorical(mdp.nu[h][z], rng)
        actions[:, h] = a
        latents[:, h] = z
    return states, actions, latents


def sample_episode(mdp: LatentLowRankMDP, policy: AnyPolicy, rng: np.random.Generator) -> Trajectory:
    states, actions, latents = _rollout(mdp, policy, 1, mdp.horizon - 1, rng)
    return Trajectory(tuple(int(s) for s in states[0]), tuple(int(a) for a in actions[0]),
                      tuple(int(z) for z in latents[0]))


# ==================== 数据集 ====================

@dataclass(frozen=True, eq=False)
class WeightedTransitions:
    """去重后的 (x, a, x') 三元组及权重（和为1），既可来自样本也可来自精确分布"""
    level: int
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    weights: np.ndarray
    num_samples: Optional[int] = None
    provenance: Mapping[str, Any] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])

    def next_state_marginal(self, num_next: int) -> np.ndarray:
        return np.bincount(self.next_states, weights=self.weights, minlength=num_next)


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    level: int
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("states", "actions", "next_states"):
            object.__setattr__(self, name, _readonly(getattr(self, name), dtype=np.int64))
        if not (self.states.shape == self.actions.shape == self.next_states.shape):
            raise ShapeMismatch("数据集三列长度不一致")

    @property
    def size(self) -> int:
        return int(self.states.shape[0])

    def head(self, n: int) -> "TransitionDataset":
        """前 n 条样本的视图（统一采集后的切片）"""
        n = min(int(n), self.size)
        provenance = dict(self.provenance, slice=n)
        return TransitionDataset(self.level, self.states[:n], self.actions[:n], self.next_states[:n], provenance)

    def validate(self, mdp: LatentLowRankMDP):
        if np.any(self.states >= mdp.num_states(self.level)) or np.any(self.states < 0):
            raise ShapeMismatch(f"第 {self.level} 层状态编号越界")
        if np.any(self.actions >= mdp.num_actions) or np.any(self.actions < 0):
            raise ShapeMismatch("动作编号越界")
        if np.any(self.next_states >= mdp.num_states(self.level + 1)) or np.any(self.next_states < 0):
            raise ShapeMismatch(f"第 {self.level + 1} 层状态编号越界")

    @cached_property
    def weighted(self) -> WeightedTransitions:
        if self.size == 0:
            raise EmptyDataset(f"第 {self.level} 层数据集为空")
        triples = np.stack([self.states, self.actions, self.next_states], axis=1)
        unique, counts = np.unique(triples, axis=0, return_counts=True)
        return WeightedTransitions(
            level=self.level,
            states=_readonly(unique[:, 0], np.int64),
            actions=_readonly(unique[:, 1], np.int64),
            next_states=_readonly(unique[:, 2], np.int64),
            weights=_readonly(counts / counts.sum()),
            num_samples=self.size,
            provenance=self.provenance,
        )


LevelData = Union[TransitionDataset, WeightedTransitions]


def as_weighted(data: LevelData) -> WeightedTransitions:
    if isinstance(data, TransitionDataset):
        return data.weighted
    if isinstance(data, WeightedTransitions):
        if data.size == 0:
            raise EmptyDataset(f"第 {data.level} 层数据为空")
        return data
    raise TypeError(f"不支持的数据类型: {type(data).__name__}")


def collect_dataset(mdp: LatentLowRankMDP, policy: AnyPolicy, level: int, n: int,
                    rng: np.random.Generator, tag: Optional[str] = None) -> TransitionDataset:
    """用混合策略采集 n 条独立的 (x_h, a_h, x_{h+1})，每条消耗一个片段"""
    if n < 1:
        raise EmptyDataset(f"样本数必须 >= 1，实际 {n}")
    if not 0 <= level < mdp.horizon:
        raise LevelMismatch(f"层号 {level} 超出 [0, {mdp.horizon})")
    states, actions, _ = _rollout(mdp, policy, n, level, rng)
    label = getattr(policy, "label", "policy")
    provenance = {"policy": label, "level": level, "n": n}
    if tag is not None:
        provenance["tag"] = tag
    logger.debug(f"采集数据: level={level}, n={n}, policy={label}")
    return TransitionDataset(level, states[:, level], actions[:, level], states[:, level + 1], provenance)


def exact_weighted_transitions(mdp: LatentLowRankMDP, policy: AnyPolicy, level: int) -> WeightedTransitions:
    """“无限数据”模式：权重为 occ_ρ(x,a)·T_h(x'|x,a)"""
    occ = exact_state_action_occupancy(mdp, policy, level)
    joint = occ[:, :, None] * mdp.transitions[level]
    x, a, y = np.nonzero(joint > 0)
    weights = joint[x, a, y]
    return WeightedTransitions(
        level=level,
        states=_readonly(x, np.int64),
        actions=_readonly(a, np.int64),
        next_states=_readonly(y, np.int64),
        weights=_readonly(weights / weights.sum()),
        num_samples=None,
        provenance={"policy": getattr(policy, "label", "policy"), "level": level, "exact": True},
    )


# ==================== DP 预言机 ====================

class BellmanBackup(NamedTuple):
    values: np.ndarray
    theta: np.ndarray


def exact_bellman_backup(mdp: LatentLowRankMDP, h: int, f: np.ndarray) -> BellmanBackup:
    """E[f(x_{h+1}) | x_h, a_h] 以及线性系数 θ*_f = Σ f(x') μ*_h(x')"""
    f = np.asarray(f, dtype=float)
    if f.shape != (mdp.num_states(h + 1),):
        raise ShapeMismatch(f"f 的形状应为 ({mdp.num_states(h + 1)},)，实际 {f.shape}")
    return BellmanBackup(values=mdp.transitions[h] @ f, theta=mdp.nu[h] @ f)


def reward_tables(mdp: LatentLowRankMDP, rewards) -> Tuple[np.ndarray, ...]:
    tables = tuple(np.asarray(t, dtype=float) for t in getattr(rewards, "tables", rewards))
    if len(tables) != mdp.horizon:
        raise ShapeMismatch(f"奖励层数应为 {mdp.horizon}，实际 {len(tables)}")
    for h, table in enumerate(tables):
        if table.shape != (mdp.num_states(h), mdp.num_actions):
            raise ShapeMismatch(f"第 {h} 层奖励形状错误: {table.shape}")
        if np.any(table < 0.0) or np.any(table > 1.0):
            raise RewardOutOfRange(f"第 {h} 层奖励超出 [0, 1]")
    return tables


class ValueIterationResult(NamedTuple):
    policy: Policy
    value: float
    q_tables: Tuple[np.ndarray, ...]


def value_iteration(mdp: LatentLowRankMDP, rewards) -> ValueIterationResult:
    """精确后向DP，平局取最小动作编号"""
    tables = reward_tables(mdp, rewards)
    v = np.zeros(mdp.num_states(mdp.horizon))
    q_tables = [None] * mdp.horizon
    actions = [None] * mdp.horizon
    for h in range(mdp.horizon - 1, -1, -1):
        q = tables[h] + mdp.transitions[h] @ v
        q_tables[h] = q
        actions[h] = np.argmax(q, axis=1)
        v = q.max(axis=1)
    policy = Policy.deterministic(actions, mdp.num_actions, label="optimal")
    return ValueIterationResult(policy, float(mdp.init @ v), tuple(q_tables))


def exact_policy_value(mdp: LatentLowRankMDP, policy: AnyPolicy, rewards) -> float:
    tables = reward_tables(mdp, rewards)
    occupancies = _occupancies(mdp, policy, mdp.horizon - 1)
    return float(sum(np.sum(occ * r) for occ, r in zip(occupancies, tables)))
