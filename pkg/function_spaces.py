import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import NORM_TOL
from errors import CoordOutOfRange, EmptyClass, LevelMismatch, RewardOutOfRange, ShapeMismatch
from mdp_core import Policy, TransitionDataset, WeightedTransitions
from regression import DesignMatrix, NextStateDesign

logger = logging.getLogger(__name__)


def _readonly(array) -> np.ndarray:
    out = np.array(array, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """候选嵌入 φ_h: X_h×A → R^d，满足 ∥φ(x,a)∥₂ ≤ 1"""
    level: int
    table: np.ndarray
    label: str = "phi"

    def __post_init__(self):
        table = _readonly(self.table)
        if table.ndim != 3:
            raise ShapeMismatch(f"特征表应为 (|X_h|, K, d)，实际 {table.shape}")
        norms = np.linalg.norm(table, axis=2)
        if np.any(norms > 1.0 + NORM_TOL):
            raise ValueError(f"特征 {self.label} 的最大范数 {norms.max():.6g} 超过 1")
        object.__setattr__(self, "table", table)

    @classmethod
    def one_hot_terminal(cls, level: int, num_states: int) -> "FeatureMap":
        """终止层特征 e(x_H)，单一动作"""
        return cls(level, np.eye(num_states)[:, None, :], label=f"terminal_{level}")

    @property
    def dim(self) -> int:
        return int(self.table.shape[2])

    @property
    def num_states(self) -> int:
        return int(self.table.shape[0])

    @property
    def num_actions(self) -> int:
        return int(self.table.shape[1])

    @cached_property
    def action_mean(self) -> np.ndarray:
        """E_{a~unif(A)} φ(x, a)，形状 (|X|, d)"""
        return self.table.mean(axis=1)

    def rows(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.table[states, actions]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "level": self.level,
            "d": self.dim,
            "shape": list(self.table.shape),
            "values": self.table.ravel().tolist(),
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FeatureMap":
        table = np.asarray(data["values"], dtype=float).reshape(data["shape"])
        if table.shape[2] != int(data["d"]):
            raise ShapeMismatch(f"特征文件维度 d={data['d']} 与形状 {table.shape} 不一致")
        return cls(int(data["level"]), table, data.get("label", "phi"))


@dataclass(frozen=True, eq=False)
class FeatureClass:
    """Φ = ∪_h Φ_h；star_index 仅供测试使用，学习器从不读取"""
    levels: Tuple[Tuple[FeatureMap, ...], ...]
    terminal_states: int
    star_index: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        levels = tuple(tuple(features) for features in self.levels)
        for h, features in enumerate(levels):
            if not features:
                raise EmptyClass(f"第 {h} 层特征类为空")
            if any(f.level != h for f in features):
                raise LevelMismatch(f"第 {h} 层特征类中存在层号不符的特征")
            if len({f.dim for f in features}) != 1:
                raise ShapeMismatch(f"第 {h} 层特征维度不一致")
        if self.star_index is not None:
            if len(self.star_index) != len(levels):
                raise ShapeMismatch("star_index 长度与层数不一致")
            for h, index in enumerate(self.star_index):
                if not 0 <= index < len(levels[h]):
                    raise ShapeMismatch(f"第 {h} 层 star_index 越界: {index}")
        object.__setattr__(self, "levels", levels)

    @property
    def horizon(self) -> int:
        return len(self.levels)

    def at(self, h: int) -> Tuple[FeatureMap, ...]:
        return self.levels[h]

    def next_level(self, h: int) -> Tuple[FeatureMap, ...]:
        """判别器所用的第 h+1 层特征；最后一层之后为终止 one-hot 特征"""
        if h + 1 < self.horizon:
            return self.levels[h + 1]
        return (self.terminal_feature,)

    @cached_property
    def terminal_feature(self) -> FeatureMap:
        return FeatureMap.one_hot_terminal(self.horizon, self.terminal_states)

    def star(self, h: int) -> FeatureMap:
        if self.star_index is None:
            raise LookupError("特征类未记录 φ* 的位置")
        return self.levels[h][self.star_index[h]]

    def restricted(self, chosen: Sequence[FeatureMap]) -> "FeatureClass":
        """每层只保留一个特征（例如学到的 φ̄）"""
        return FeatureClass(tuple((f,) for f in chosen), self.terminal_states)


class DiscriminatorKind(str, Enum):
    F_CLIPPED = "f_clipped"
    F_UNCLIPPED = "f_unclipped"
    F_SIMPLEX_COORD = "f_simplex_coord"
    G_CLASS = "g_class"


@dataclass(frozen=True, eq=False)
class Discriminator:
    """下一层判别函数 v(x')

    F: clip_[0,L](E_unif⟨φ'(x',a), θ⟩)；F_UNCLIPPED 不截断；
    G: clip_[0,L](max_a R(x',a) + ⟨φ'(x',a), θ⟩)；
    坐标类: E_unif φ'(x',a)[i]。
    """
    kind: DiscriminatorKind
    feature: FeatureMap
    theta: Optional[np.ndarray] = None
    bound: float = 1.0
    reward: Optional[np.ndarray] = None
    coord: Optional[int] = None
    clip_high: float = 1.0

    def __post_init__(self):
        if self.kind == DiscriminatorKind.F_SIMPLEX_COORD:
            if self.coord is None or not 0 <= self.coord < self.feature.dim:
                raise CoordOutOfRange(f"坐标 {self.coord} 超出 [0, {self.feature.dim})")
            return
        theta = _readonly(np.zeros(self.feature.dim) if self.theta is None else self.theta)
        if theta.shape != (self.feature.dim,):
            raise ShapeMismatch(f"θ 维度 {theta.shape} 与特征维度 {self.feature.dim} 不一致")
        if np.linalg.norm(theta) > self.bound * (1.0 + NORM_TOL):
            raise ValueError(f"∥θ∥={np.linalg.norm(theta):.6g} 超过 B={self.bound}")
        if self.bound < self.clip_high * np.sqrt(self.feature.dim) * (1.0 - NORM_TOL):
            raise ValueError(f"B={self.bound} 小于 L√d={self.clip_high * np.sqrt(self.feature.dim):.6g}")
        object.__setattr__(self, "theta", theta)
        if self.kind == DiscriminatorKind.G_CLASS:
            reward = np.zeros(self.feature.table.shape[:2]) if self.reward is None else self.reward
            reward = _readonly(reward)
            if reward.shape != self.feature.table.shape[:2]:
                raise ShapeMismatch(f"G 类奖励形状 {reward.shape} 与特征不匹配")
            object.__setattr__(self, "reward", reward)

    @property
    def level(self) -> int:
        return self.feature.level

    @property
    def clipped(self) -> bool:
        return self.kind in (DiscriminatorKind.F_CLIPPED, DiscriminatorKind.G_CLASS)

    def values(self) -> np.ndarray:
        """在全部下一层状态上求值"""
        if self.kind == DiscriminatorKind.F_SIMPLEX_COORD:
            return self.feature.action_mean[:, self.coord]
        if self.kind == DiscriminatorKind.G_CLASS:
            raw = (self.reward + self.feature.table @ self.theta).max(axis=1)
        else:
            raw = self.feature.action_mean @ self.theta
        if self.clipped:
            return np.clip(raw, 0.0, self.clip_high)
        return raw

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "feature": self.feature.label,
            "level": self.level,
            "theta": None if self.theta is None else self.theta.tolist(),
            "bound": self.bound,
            "coord": self.coord,
            "clip_high": self.clip_high,
        }


def eval_discriminator(v: Discriminator, x_next: int) -> float:
    if not 0 <= x_next < v.feature.num_states:
        raise ShapeMismatch(f"状态 {x_next} 超出第 {v.level} 层状态集")
    return float(v.values()[x_next])


def eval_targets(v: Discriminator, dataset: Union[TransitionDataset, WeightedTransitions]) -> np.ndarray:
    """f(D_h)：在每条样本的 x_{h+1} 上求值"""
    if dataset.level + 1 != v.level:
        raise LevelMismatch(f"数据集层号 {dataset.level} 与判别器层号 {v.level} 不匹配")
    return v.values()[dataset.next_states]


@dataclass(frozen=True, eq=False)
class RewardFunction:
    tables: Tuple[np.ndarray, ...]
    label: str = "reward"

    def __post_init__(self):
        tables = tuple(_readonly(t) for t in self.tables)
        for h, table in enumerate(tables):
            if table.ndim != 2:
                raise ShapeMismatch(f"第 {h} 层奖励表应为二维")
            if np.any(table < 0.0) or np.any(table > 1.0):
                raise RewardOutOfRange(f"奖励 {self.label} 第 {h} 层超出 [0, 1]")
        object.__setattr__(self, "tables", tables)

    @classmethod
    def zeros(cls, state_counts: Sequence[int], num_actions: int, label: str = "zero") -> "RewardFunction":
        return cls(tuple(np.zeros((n, num_actions)) for n in state_counts), label)

    @classmethod
    def at_level(cls, state_counts: Sequence[int], num_actions: int, level: int,
                 table: np.ndarray, label: str = "terminal") -> "RewardFunction":
        """只在第 level 层非零（其余层为 0）"""
        tables = [np.zeros((n, num_actions)) for n in state_counts]
        tables[level] = np.asarray(table, dtype=float)
        return cls(tuple(tables), label)

    @property
    def horizon(self) -> int:
        return len(self.tables)

    def to_dict(self) -> Dict[str, Any]:
        return {"label": self.label, "tables": [t.tolist() for t in self.tables]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RewardFunction":
        return cls(tuple(np.asarray(t, dtype=float) for t in data["tables"]), data.get("label", "reward"))


@dataclass(frozen=True, eq=False)
class QFunction:
    """clip(R_h + ⟨φ_h, w⟩)"""
    level: int
    reward: np.ndarray
    feature: FeatureMap
    weight: np.ndarray
    clip_high: float
    clip_low: float = 0.0
    radius: Optional[float] = None

    def __post_init__(self):
        if self.radius is not None and np.linalg.norm(self.weight) > self.radius * (1.0 + NORM_TOL):
            raise ValueError(f"∥w∥ 超过半径 {self.radius}")

    def raw_values(self) -> np.ndarray:
        return self.reward + self.feature.table @ self.weight

    def values(self) -> np.ndarray:
        return np.clip(self.raw_values(), self.clip_low, self.clip_high)


def greedy_policy_from_q(q_tables: Sequence[np.ndarray], label: str = "greedy") -> Policy:
    """逐层 argmax，平局取最小动作编号"""
    tables = [np.asarray(q, dtype=float) for q in q_tables]
    actions = [np.argmax(q, axis=1) for q in tables]
    return Policy.deterministic(actions, tables[0].shape[1], label=label)


@lru_cache(maxsize=512)
def feature_design(feature: FeatureMap, data: WeightedTransitions, num_next: int) -> NextStateDesign:
    """(层, 特征) 对应的设计矩阵，按对象身份缓存"""
    if feature.level != data.level:
        raise LevelMismatch(f"特征层号 {feature.level} 与数据层号 {data.level} 不匹配")
    rows = feature.rows(data.states, data.actions)
    design = DesignMatrix(rows, np.asarray(data.weights), label=feature.label,
                          dataset=str(data.provenance.get("policy", "")))
    return NextStateDesign(design, data.next_states, num_next)
