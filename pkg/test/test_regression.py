import numpy as np
import pytest

from errors import DimMismatch
from mdp_core import make_stream
from regression import (BallRegressor, DesignMatrix, NextStateDesign, RidgeConfig, constrained_lsq,
                        empirical_loss, residual_operator, ridge_solve, sym_quad_max)


def _rows(rng, n, d):
    rows = rng.standard_normal((n, d))
    return rows / np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1.0) * rng.random((n, 1))


def _ball(rng, count, d, radius):
    directions = rng.standard_normal((count, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * radius * rng.random((count, 1)) ** (1.0 / d)


def test_empirical_loss_weighted_and_plain():
    X = np.eye(2)
    y = np.array([1.0, 3.0])
    w = np.zeros(2)
    plain = empirical_loss(X, w, y)
    assert plain.total == pytest.approx(10.0)
    assert plain.mean == pytest.approx(5.0)
    weighted = empirical_loss(X, w, y, sample_weight=np.array([3.0, 1.0]))
    assert weighted.mean == pytest.approx((3.0 * 1.0 + 9.0) / 4.0)


def test_empirical_loss_dim_mismatch():
    with pytest.raises(DimMismatch):
        empirical_loss(np.eye(2), np.zeros(3), np.zeros(2))


def test_constrained_lsq_interior_matches_least_squares():
    rng = make_stream(0, "interior")
    X = _rows(rng, 30, 3)
    w_true = np.array([0.2, -0.1, 0.3])
    y = X @ w_true
    result = constrained_lsq(X, y, 5.0)
    np.testing.assert_allclose(result.weight, w_true, atol=1e-6)
    assert not result.on_boundary
    assert result.loss == pytest.approx(0.0, abs=1e-12)


def test_constrained_lsq_beats_random_feasible_points():
    rng = make_stream(1, "feasible")
    for _ in range(50):
        X = _rows(rng, 20, 3)
        y = rng.normal(size=20)
        radius = float(rng.uniform(0.1, 2.0))
        result = constrained_lsq(X, y, radius)
        assert np.linalg.norm(result.weight) <= radius * (1.0 + 1e-9)
        candidates = _ball(rng, 10000, 3, radius)
        losses = ((X @ candidates.T - y[:, None]) ** 2).mean(axis=0)
        assert result.loss <= losses.min() + 1e-9


def test_constrained_lsq_boundary_case():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([3.0, 4.0])
    result = constrained_lsq(X, y, 1.0)
    assert result.on_boundary
    np.testing.assert_allclose(result.weight, [0.6, 0.8], atol=1e-6)


def test_rank_deficient_gram_is_finite():
    X = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    y = np.array([1.0, 2.0, 0.5])
    result = constrained_lsq(X, y, 10.0)
    assert np.all(np.isfinite(result.weight))
    assert result.weight[1] == pytest.approx(0.0, abs=1e-9)


def test_batch_loss_matches_single_solves():
    rng = make_stream(2, "batch")
    X = _rows(rng, 40, 3)
    gram = X.T @ X / 40
    solver = BallRegressor(gram)
    targets = rng.normal(size=(6, 40))
    b = targets @ X / 40
    c = (targets ** 2).mean(axis=1)
    batch = solver.min_loss_batch(b, c, 0.7)
    single = [solver.solve(b[k], c[k], 0.7).loss for k in range(6)]
    np.testing.assert_allclose(batch, single, atol=1e-9)


def test_ridge_residual_identity():
    rng = make_stream(3, "ridge")
    X = _rows(rng, 15, 3)
    y = rng.normal(size=15)
    w = ridge_solve(X, y, 0.5)
    residual = residual_operator(X, 0.5) @ y
    np.testing.assert_allclose(residual, y - X @ w, atol=1e-10)
    assert np.mean(residual ** 2) == pytest.approx(empirical_loss(X, w, y).mean, abs=1e-10)


def test_ridge_rejects_nonpositive_lambda():
    with pytest.raises(ValueError):
        ridge_solve(np.eye(2), np.ones(2), 0.0)
    with pytest.raises(ValueError):
        RidgeConfig(-1.0)


def test_ridge_radius_conversion():
    ridge = RidgeConfig.from_radius(4.0)
    assert ridge.lam == pytest.approx(0.25)
    assert ridge.radius == pytest.approx(4.0)


@pytest.mark.parametrize("dim", [2, 3])
def test_sym_quad_max_matches_grid(dim):
    rng = make_stream(4, "quad", dim)
    M = rng.normal(size=(dim, dim))
    radius = 1.5
    result = sym_quad_max(M, radius)
    if dim == 2:
        angles = np.linspace(0.0, 2.0 * np.pi, 20000, endpoint=False)
        grid = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    else:
        p, a = np.meshgrid(np.linspace(0.0, np.pi, 400), np.linspace(0.0, 2.0 * np.pi, 800), indexing="ij")
        grid = radius * np.stack([np.sin(p) * np.cos(a), np.sin(p) * np.sin(a), np.cos(p)], axis=-1).reshape(-1, 3)
    sym = (M + M.T) / 2.0
    brute = max(0.0, float(np.einsum("kd,de,ke->k", grid, sym, grid).max()))
    assert result.value == pytest.approx(brute, rel=1e-3, abs=1e-12)
    assert result.theta @ sym @ result.theta == pytest.approx(result.value, rel=1e-9, abs=1e-12)


def test_sym_quad_max_negative_definite_returns_zero():
    result = sym_quad_max(-np.eye(3), 2.0)
    assert result.value == 0.0
    np.testing.assert_array_equal(result.theta, np.zeros(3))


def test_next_state_design_matches_direct_fit():
    rng = make_stream(5, "design")
    rows = _rows(rng, 25, 2)
    next_states = rng.integers(4, size=25)
    weights = np.full(25, 1.0 / 25)
    design = NextStateDesign(DesignMatrix(rows, weights), next_states, 4)
    values = rng.random(4)
    fitted = design.fit(values, 1.0)
    direct = constrained_lsq(rows, values[next_states], 1.0)
    assert fitted.loss == pytest.approx(direct.loss, abs=1e-10)
    assert design.min_loss(values, 1.0)[0] == pytest.approx(direct.loss, abs=1e-9)


def test_design_matrix_rejects_long_rows():
    with pytest.raises(ValueError):
        DesignMatrix(np.array([[2.0, 0.0]]), np.ones(1))


def test_constrained_lsq_boundary_satisfies_stationarity():
    rng = make_stream(6, "kkt")
    for _ in range(20):
        X = _rows(rng, 25, 3)
        y = 5.0 * rng.normal(size=25)
        result = constrained_lsq(X, y, 0.1)
        assert result.on_boundary
        gradient = X.T @ (X @ result.weight - y) / 25 + result.lam * result.weight
        assert np.linalg.norm(gradient) <= 1e-6


def test_ridge_norm_shrinks_with_lambda():
    rng = make_stream(7, "ridge_path")
    for _ in range(20):
        X = _rows(rng, 15, 3)
        y = rng.normal(size=15)
        lams = np.sort(rng.uniform(0.01, 5.0, size=4))
        norms = [np.linalg.norm(ridge_solve(X, y, lam)) for lam in lams]
        assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))
