import logging
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy import linalg, optimize

from config import BISECTION_MAX_ITER, BISECTION_TOL, EIGEN_TOL, LSQ_JITTER, NORM_TOL
from errors import DimMismatch

logger = logging.getLogger(__name__)


class LossValue(NamedTuple):
    total: float
    mean: float


class LsqResult(NamedTuple):
    weight: np.ndarray
    lam: float
    on_boundary: bool
    loss: float


class QuadMax(NamedTuple):
    value: float
    theta: np.ndarray


@dataclass(frozen=True)
class RidgeConfig:
    """岭回归正则化参数；可枚举类流水线中 B = 1/λ"""
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"岭参数必须为正: {self.lam}")

    @classmethod
    def from_radius(cls, radius: float) -> "RidgeConfig":
        return cls(1.0 / float(radius))

    @property
    def radius(self) -> float:
        return 1.0 / self.lam


def _normalized_weights(n: int, sample_weight: Optional[np.ndarray]) -> np.ndarray:
    if sample_weight is None:
        return np.full(n, 1.0 / n)
    p = np.asarray(sample_weight, dtype=float)
    if p.shape != (n,):
        raise DimMismatch(f"样本权重长度 {p.shape} 与样本数 {n} 不一致")
    return p / p.sum()


def _check_xy(X: np.ndarray, y: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DimMismatch(f"设计矩阵应为二维，实际 {X.shape}")
    if y is not None:
        y = np.asarray(y, dtype=float)
        if y.shape != (X.shape[0],):
            raise DimMismatch(f"目标长度 {y.shape} 与设计矩阵行数 {X.shape[0]} 不一致")
    return X, y


def empirical_loss(X: np.ndarray, w: np.ndarray, y: np.ndarray,
                   sample_weight: Optional[np.ndarray] = None) -> LossValue:
    """平方损失：total 为按权重求和（无权重时即 L_D），mean 为按权重归一化的均值"""
    X, y = _check_xy(X, y)
    w = np.asarray(w, dtype=float)
    if w.shape != (X.shape[1],):
        raise DimMismatch(f"权重维度 {w.shape} 与特征维度 {X.shape[1]} 不一致")
    sq = (X @ w - y) ** 2
    if sample_weight is None:
        total = float(sq.sum())
        return LossValue(total, total / max(len(y), 1))
    s = np.asarray(sample_weight, dtype=float)
    total = float(s @ sq)
    return LossValue(total, total / float(s.sum()))


class BallRegressor:
    """固定加权Gram矩阵上的球约束最小二乘

    均值损失写成 c − 2bᵀw + wᵀGw，对 G 做一次特征分解后，
    每个目标只需要 (b, c) 两个矩。
    """

    def __init__(self, gram: np.ndarray):
        gram = (gram + gram.T) / 2.0
        evals, evecs = linalg.eigh(gram)
        self.evals = np.clip(evals, 0.0, None)
        self.evecs = evecs
        self.null = self.evals <= EIGEN_TOL
        # 零空间方向的分子恒为 0，分母取 1 避免 0/0
        self._base = np.where(self.null, 1.0, self.evals)

    @property
    def dim(self) -> int:
        return int(self.evals.shape[0])

    def _rotate(self, b: np.ndarray) -> np.ndarray:
        b_rot = b @ self.evecs
        b_rot[..., self.null] = 0.0
        return b_rot

    def _coef(self, b_rot: np.ndarray, lam) -> np.ndarray:
        return b_rot / (self._base + lam)

    def _norm(self, b_rot: np.ndarray, lam) -> np.ndarray:
        return np.sqrt(np.sum(self._coef(b_rot, lam) ** 2, axis=-1))

    def solve(self, b: np.ndarray, c: float, radius: float) -> LsqResult:
        b_rot = self._rotate(np.asarray(b, dtype=float).copy())
        coef = self._coef(b_rot, LSQ_JITTER)
        lam = 0.0
        if np.linalg.norm(coef) > radius:
            upper = float(np.linalg.norm(b_rot)) / radius
            lam = optimize.bisect(lambda t: self._norm(b_rot, t) - radius, 0.0, upper,
                                  xtol=1e-15, rtol=8.9e-16,
                                  maxiter=BISECTION_MAX_ITER, disp=False)
            coef = self._coef(b_rot, lam)
            norm = float(np.linalg.norm(coef))
            if norm > radius:
                coef *= radius / norm
        w = self.evecs @ coef
        loss = float(c - 2.0 * (b_rot @ coef) + coef @ (self.evals * coef))
        on_boundary = bool(abs(np.linalg.norm(coef) - radius) <= BISECTION_TOL * radius)
        return LsqResult(w, float(lam), on_boundary, max(loss, 0.0))

    def min_loss_batch(self, b: np.ndarray, c: np.ndarray, radius: float) -> np.ndarray:
        """批量版本，只返回最小均值损失，供判别器搜索使用"""
        b_rot = self._rotate(np.atleast_2d(np.asarray(b, dtype=float)).copy())
        c = np.asarray(c, dtype=float)
        coef = self._coef(b_rot, LSQ_JITTER)
        outside = np.linalg.norm(coef, axis=1) > radius
        if np.any(outside):
            sub = b_rot[outside]
            lo = np.zeros(sub.shape[0])
            hi = np.linalg.norm(sub, axis=1) / radius
            for _ in range(BISECTION_MAX_ITER):
                mid = (lo + hi) / 2.0
                too_long = self._norm(sub, mid[:, None]) > radius
                lo = np.where(too_long, mid, lo)
                hi = np.where(too_long, hi, mid)
                if np.all(hi - lo <= 1e-15 + 8.9e-16 * hi):
                    break
            # 取上端点保证 ∥w∥ ≤ radius
            coef[outside] = self._coef(sub, hi[:, None])
        loss = c - 2.0 * np.sum(b_rot * coef, axis=1) + np.sum(coef * coef * self.evals, axis=1)
        return np.maximum(loss, 0.0)


def constrained_lsq(X: np.ndarray, y: np.ndarray, radius: float,
                    sample_weight: Optional[np.ndarray] = None) -> LsqResult:
    """min_{∥w∥₂ ≤ radius} 均值平方损失，解在岭路径上二分 λ 得到"""
    if not radius > 0:
        raise ValueError(f"半径必须为正: {radius}")
    X, y = _check_xy(X, y)
    p = _normalized_weights(X.shape[0], sample_weight)
    gram = X.T @ (p[:, None] * X)
    return BallRegressor(gram).solve(X.T @ (p * y), float(p @ (y * y)), radius)


def ridge_solve(X: np.ndarray, y: np.ndarray, lam: float, n: Optional[int] = None,
                sample_weight: Optional[np.ndarray] = None) -> np.ndarray:
    """w = (XᵀPX + λI)⁻¹ XᵀPy，P 为 1/n 或归一化样本权重"""
    if not lam > 0:
        raise ValueError(f"岭参数必须为正: {lam}")
    X, y = _check_xy(X, y)
    if sample_weight is None:
        p = np.full(X.shape[0], 1.0 / (n or X.shape[0]))
    else:
        p = _normalized_weights(X.shape[0], sample_weight)
    lhs = X.T @ (p[:, None] * X) + lam * np.eye(X.shape[1])
    w = linalg.solve(lhs, X.T @ (p * y), assume_a="pos")
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("岭回归解出现非有限值")
    return w


def residual_operator(X: np.ndarray, lam: float, n: Optional[int] = None,
                      sample_weight: Optional[np.ndarray] = None) -> np.ndarray:
    """A(φ) = I − X(XᵀPX + λI)⁻¹XᵀP，满足 A y = y − X·ridge_solve(X, y)"""
    if not lam > 0:
        raise ValueError(f"岭参数必须为正: {lam}")
    X, _ = _check_xy(X)
    m = X.shape[0]
    if sample_weight is None:
        p = np.full(m, 1.0 / (n or m))
    else:
        p = _normalized_weights(m, sample_weight)
    lhs = X.T @ (p[:, None] * X) + lam * np.eye(X.shape[1])
    hat = X @ linalg.solve(lhs, X.T * p[None, :], assume_a="pos")
    return np.eye(m) - hat


def sym_quad_max(M: np.ndarray, radius: float) -> QuadMax:
    """max_{∥θ∥ ≤ r} θᵀMθ = r²·max(λ_max, 0)，在 r·(最大特征向量) 处取得"""
    M = np.asarray(M, dtype=float)
    M = (M + M.T) / 2.0
    evals, evecs = linalg.eigh(M)
    top = float(evals[-1])
    if top <= EIGEN_TOL:
        return QuadMax(0.0, np.zeros(M.shape[0]))
    v = evecs[:, -1]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return QuadMax(radius * radius * top, radius * v)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """加权设计矩阵：行 φ_h(x_i, a_i)，权重和为 1"""
    rows: np.ndarray
    weights: np.ndarray
    label: str = ""
    dataset: str = ""

    def __post_init__(self):
        if self.rows.ndim != 2 or self.weights.shape != (self.rows.shape[0],):
            raise DimMismatch(f"设计矩阵形状 {self.rows.shape} 与权重 {self.weights.shape} 不匹配")
        if np.any(np.linalg.norm(self.rows, axis=1) > 1.0 + NORM_TOL):
            raise ValueError(f"设计矩阵 {self.label} 存在范数大于 1 的行")

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    @cached_property
    def gram(self) -> np.ndarray:
        return self.rows.T @ (self.weights[:, None] * self.rows)

    @cached_property
    def solver(self) -> BallRegressor:
        return BallRegressor(self.gram)


class NextStateDesign:
    """目标为下一状态函数 y_i = g(x'_i) 时的回归预计算

    cross = XᵀPS (d×|X'|)，marginal 为 x' 的加权边际，于是
    b = cross @ g，c = marginal · g²。
    """

    def __init__(self, design: DesignMatrix, next_states: np.ndarray, num_next: int):
        self.design = design
        self.next_states = np.asarray(next_states, dtype=np.int64)
        self.num_next = int(num_next)
        weighted_rows = design.weights[:, None] * design.rows
        cross_t = np.zeros((self.num_next, design.dim))
        np.add.at(cross_t, self.next_states, weighted_rows)
        self.cross = cross_t.T
        self.marginal = np.bincount(self.next_states, weights=design.weights, minlength=self.num_next)

    @property
    def label(self) -> str:
        return self.design.label

    def moments(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """values 可为 (|X'|,) 或 (k, |X'|)"""
        values = np.asarray(values, dtype=float)
        return values @ self.cross.T, (values * values) @ self.marginal

    def fit(self, values: np.ndarray, radius: float) -> LsqResult:
        b, c = self.moments(values)
        return self.design.solver.solve(b, float(c), radius)

    def min_loss(self, values: np.ndarray, radius: float) -> np.ndarray:
        b, c = self.moments(np.atleast_2d(values))
        return self.design.solver.min_loss_batch(b, c, radius)

    def ridge_residual_quadratic(self, ridge: RidgeConfig) -> np.ndarray:
        """Q 满足 gᵀQg = 岭残差 A(φ)y 的加权均方，y = g(x')"""
        operator = residual_operator(self.design.rows, ridge.lam, sample_weight=self.design.weights)
        selector = np.eye(self.num_next)[self.next_states]
        residual = operator @ selector
        return residual.T @ (self.design.weights[:, None] * residual)
