"""Tests of the non-negative QP kernel against exhaustive enumeration."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcsid.qp import (
    NonnegQp,
    enumerate_oracle,
    kkt_residual,
    solve_nonneg_qp,
    solve_nonneg_qp_multi,
)


def random_pd_qp(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    Q = A @ A.T + 0.1 * np.eye(n)
    g = scale * rng.standard_normal(n)
    return NonnegQp(Q, g)


def test_rejects_asymmetric_q():
    with pytest.raises(ValueError):
        NonnegQp(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2))


def test_rejects_indefinite_q():
    with pytest.raises(ValueError):
        NonnegQp(np.diag([1.0, -1.0]), np.zeros(2))


def test_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        NonnegQp(np.eye(2), np.zeros(3))


def test_zero_linear_term_gives_origin():
    sol = solve_nonneg_qp(NonnegQp(np.eye(3), np.zeros(3)))
    assert np.allclose(sol.z, 0.0)
    assert sol.kkt_residual == 0.0


def test_interior_optimum_matches_unconstrained():
    # g strictly negative: the unconstrained minimizer -Q^{-1} g is positive
    Q = np.array([[2.0, 0.3], [0.3, 1.5]])
    g = np.array([-1.0, -2.0])
    sol = solve_nonneg_qp(NonnegQp(Q, g))
    assert np.allclose(sol.z, np.linalg.solve(Q, -g), atol=1e-12)
    assert sol.active_mask == 0


def test_fully_active_optimum():
    sol = solve_nonneg_qp(NonnegQp(np.eye(2), np.array([1.0, 2.0])))
    assert np.allclose(sol.z, 0.0)
    assert sol.active_mask == 0b11


def test_matches_enumeration_oracle():
    rng = np.random.default_rng(42)
    for _ in range(150):
        n = int(rng.integers(1, 9))
        problem = random_pd_qp(rng, n, scale=float(rng.choice([0.1, 1, 10])))
        sol = solve_nonneg_qp(problem)
        ref = enumerate_oracle(problem)
        assert np.max(np.abs(sol.z - ref.z)) < 1e-8
        assert sol.kkt_residual < 1e-8


def test_warm_start_does_not_change_solution():
    rng = np.random.default_rng(7)
    problem = random_pd_qp(rng, 6)
    cold = solve_nonneg_qp(problem)
    warm = solve_nonneg_qp(problem, z0=rng.uniform(0, 1, 6))
    assert np.allclose(cold.z, warm.z, atol=1e-10)


def test_kkt_residual_zero_only_at_solution():
    Q = np.eye(2)
    g = np.array([-1.0, 1.0])
    assert kkt_residual(Q, g, np.array([1.0, 0.0])) == 0.0
    assert kkt_residual(Q, g, np.array([0.5, 0.0])) > 0.0


def test_multi_matches_single_solver():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 10))
        m = int(rng.integers(1, 60))
        problem = random_pd_qp(rng, n)
        G = rng.standard_normal((n, m)) * 5.0
        Z = solve_nonneg_qp_multi(problem.Q, G)
        assert Z.shape == (n, m)
        for j in range(m):
            ref = solve_nonneg_qp(NonnegQp(problem.Q, G[:, j]))
            assert np.max(np.abs(Z[:, j] - ref.z)) < 1e-8


def test_multi_ill_conditioned_columns():
    # widely spread curvature exercises the anti-cycling path
    rng = np.random.default_rng(11)
    Q = np.diag([1e-4, 1.0, 1e4]) + 1e-3
    Q = 0.5 * (Q + Q.T)
    G = rng.standard_normal((3, 200)) * 100.0
    Z = solve_nonneg_qp_multi(Q, G)
    for j in range(0, 200, 17):
        ref = solve_nonneg_qp(NonnegQp(Q, G[:, j]))
        assert np.max(np.abs(Z[:, j] - ref.z)) < 1e-6


def test_empty_problem():
    sol = solve_nonneg_qp(NonnegQp(np.zeros((0, 0)), np.zeros(0)))
    assert sol.z.shape == (0,)
    Z = solve_nonneg_qp_multi(np.zeros((0, 0)), np.zeros((0, 5)))
    assert Z.shape == (0, 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8))
def test_solution_is_feasible_kkt_point(seed, n):
    rng = np.random.default_rng(seed)
    problem = random_pd_qp(rng, n)
    sol = solve_nonneg_qp(problem)
    assert (sol.z >= 0).all()
    w = problem.Q @ sol.z + problem.g
    scale = max(1.0, np.abs(problem.g).max())
    # primal feasibility, dual feasibility, complementarity
    assert (w >= -1e-8 * scale).all()
    assert np.abs(sol.z * w).max() < 1e-7 * scale


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_objective_not_above_random_feasible_points(seed):
    rng = np.random.default_rng(seed)
    problem = random_pd_qp(rng, 5)
    sol = solve_nonneg_qp(problem)
    best = problem.objective(sol.z)
    for _ in range(30):
        z = rng.uniform(0, 3, 5)
        assert best <= problem.objective(z) + 1e-9
