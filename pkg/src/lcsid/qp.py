"""Strongly-convex QP solver over the non-negative orthant.

This is the single numerical kernel of the package: both the LCP solve
(through the proxy-variable reformulation) and the violation-loss inner
problem reduce to

    min_{z >= 0}  0.5 * z^T Q z + g^T z + constant

with Q symmetric positive definite.  The primary solver is a primal
active-set method (Lawson-Hanson style pivoting) with a projected-gradient
fallback; an exhaustive active-set enumeration is provided as a test oracle.
"""

from dataclasses import dataclass

import numpy as np

from .errors import SolverError

DEFAULT_TOLERANCE = 1e-10
PG_MAX_ITERATIONS = 100_000

# relative eigenvalue floor below which Q is rejected as (numerically)
# semi-definite
_PD_REL_FLOOR = 1e-12


@dataclass(frozen=True)
class NonnegQp:
    """min 0.5 z^T Q z + g^T z + constant over z >= 0, with Q PD."""

    Q: np.ndarray
    g: np.ndarray
    constant: float = 0.0

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        g = np.asarray(self.g, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError(f"Q must be square, got shape {Q.shape}")
        if g.shape != (Q.shape[0],):
            raise ValueError(f"g has shape {g.shape}, expected ({Q.shape[0]},)")
        if Q.size and np.max(np.abs(Q - Q.T)) > 1e-12 * max(1.0, np.max(np.abs(Q))):
            raise ValueError("Q is not symmetric within tolerance")
        if Q.size:
            eigs = np.linalg.eigvalsh(0.5 * (Q + Q.T))
            if eigs[0] <= _PD_REL_FLOOR * max(eigs[-1], 0.0):
                raise ValueError(
                    f"Q is not positive definite: min eig {eigs[0]:.3e}, "
                    f"max eig {eigs[-1]:.3e}"
                )
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "g", g)

    @property
    def n(self):
        return self.g.size

    def objective(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * z @ self.Q @ z + self.g @ z + self.constant


@dataclass(frozen=True)
class QpSolution:
    """Minimizer together with its KKT diagnostics."""

    z: np.ndarray
    active_mask: int
    kkt_residual: float
    iterations: int


def kkt_residual(Q, g, z):
    """max_i |min(z_i, (Qz+g)_i)| -- zero exactly at the KKT point."""
    if z.size == 0:
        return 0.0
    w = Q @ z + g
    return float(np.max(np.abs(np.minimum(z, w))))


def _active_bitmask(z, tolerance):
    mask = 0
    for i in np.flatnonzero(z <= tolerance):
        mask |= 1 << int(i)
    return mask


def _solution(Q, g, z, iterations, tolerance):
    return QpSolution(
        z=z,
        active_mask=_active_bitmask(z, tolerance),
        kkt_residual=kkt_residual(Q, g, z),
        iterations=iterations,
    )


def _projected_gradient(Q, g, z, tolerance):
    """Fallback: projected gradient with the 1/L step (L = max eig of Q)."""
    step = 1.0 / np.linalg.eigvalsh(Q)[-1]
    for it in range(PG_MAX_ITERATIONS):
        w = Q @ z + g
        res = float(np.max(np.abs(np.minimum(z, w))))
        if res <= tolerance:
            return z, it
        z = np.maximum(0.0, z - step * w)
    raise SolverError(
        "projected-gradient fallback did not converge",
        residual=kkt_residual(Q, g, z),
    )


def solve_nonneg_qp(problem, tolerance=DEFAULT_TOLERANCE, max_iterations=None,
                    z0=None):
    """Solve the non-negative QP with a primal active-set method.

    `z0`, if given, only seeds the initial free set; the result is
    independent of it (the minimizer is unique for PD Q).
    """
    Q, g = problem.Q, problem.g
    n = problem.n
    if n == 0:
        return QpSolution(z=np.zeros(0), active_mask=0, kkt_residual=0.0,
                          iterations=0)
    if max_iterations is None:
        max_iterations = 10 * n

    free = np.zeros(n, dtype=bool)
    if z0 is not None:
        free = np.asarray(z0, dtype=float) > 0
    z = np.zeros(n)
    pivots = 0

    while True:
        # inner loop: restore primal feasibility on the current free set
        while True:
            z_new = np.zeros(n)
            if free.any():
                idx = np.flatnonzero(free)
                z_new[idx] = np.linalg.solve(Q[np.ix_(idx, idx)], -g[idx])
            neg = free & (z_new < 0.0)
            if not neg.any():
                z = z_new
                break
            pivots += 1
            if pivots > max_iterations:
                z, extra = _projected_gradient(Q, g, np.maximum(z, 0.0),
                                               tolerance)
                return _solution(Q, g, z, pivots + extra, tolerance)
            # ratio test toward z_new; blocking indices leave the free set
            ratios = np.full(n, np.inf)
            ratios[neg] = z[neg] / (z[neg] - z_new[neg])
            alpha = float(np.min(ratios))
            z = z + alpha * (z_new - z)
            blocking = neg & np.isclose(ratios, alpha, rtol=0.0, atol=1e-14)
            z[blocking] = 0.0
            free[blocking] = False

        w = Q @ z + g
        candidates = (~free) & (w < -tolerance)
        if not candidates.any():
            return _solution(Q, g, z, pivots, tolerance)
        pivots += 1
        if pivots > max_iterations:
            z, extra = _projected_gradient(Q, g, z, tolerance)
            return _solution(Q, g, z, pivots + extra, tolerance)
        # most negative dual violation enters; argmin breaks ties at the
        # lowest index
        w_masked = np.where(candidates, w, np.inf)
        free[int(np.argmin(w_masked))] = True


def solve_nonneg_qp_multi(Q, G, tolerance=DEFAULT_TOLERANCE,
                          max_block_iterations=None, free0=None,
                          free_out=None):
    """Solve min_{z>=0} 0.5 z^T Q z + g^T z for every column g of G.

    Block principal pivoting on the KKT complementarity system; every sweep
    refines all unsettled columns with one batched linear solve.  Columns
    that fail to settle within the block-iteration cap are finished by the
    single-problem active-set solver.  Returns Z with one solution per
    column of G.

    `free0` (m, n boolean) seeds the initial free sets -- useful for
    warm-starting across optimizer steps; the result does not depend on it.
    If `free_out` is given, the final free sets are written into it.
    """
    Q = 0.5 * (np.asarray(Q, dtype=float) + np.asarray(Q, dtype=float).T)
    G = np.asarray(G, dtype=float)
    n, m = G.shape
    if n == 0 or m == 0:
        return np.zeros((n, m))
    if max_block_iterations is None:
        max_block_iterations = 20 + 2 * n

    eye = np.eye(n)
    if free0 is not None:
        free = np.array(free0, dtype=bool)
        if free.shape != (m, n):
            raise ValueError(f"free0 must have shape ({m}, {n})")
    else:
        free = np.zeros((m, n), dtype=bool)
    Z = np.zeros((m, n))
    pending = np.arange(m)
    sweeps = np.zeros(m, dtype=int)
    # after this many full block pivots a sample falls back to flipping a
    # single least-index infeasibility, which cannot cycle for PD Q
    block_phase = 10

    for _ in range(max_block_iterations):
        if pending.size == 0:
            break
        f = free[pending]
        g = G[:, pending].T
        # one batched solve for all pending samples: rows of active indices
        # are replaced by identity rows (z_i = 0), free rows keep Q
        M = np.where(f[:, :, None], Q[None], eye[None])
        rhs = np.where(f, -g, 0.0)
        try:
            Zp = np.linalg.solve(M, rhs[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            break  # leave the rest to the per-sample solver
        W = Zp @ Q.T + g
        bad = (f & (Zp < -tolerance)) | (~f & (W < -tolerance))
        still = bad.any(axis=1)
        done = ~still
        Z[pending[done]] = np.maximum(Zp[done], 0.0)
        rows = pending[still]
        flips = bad[still]
        slow = sweeps[rows] >= block_phase
        if slow.any():
            lowest = np.argmax(flips[slow], axis=1)
            single = np.zeros_like(flips[slow])
            single[np.arange(lowest.size), lowest] = True
            flips[slow] = single
        # flip every infeasible index at once (block pivot), or just the
        # lowest one for samples that have been cycling
        free[rows] ^= flips
        sweeps[rows] += 1
        pending = rows

    for j in pending:
        sol = solve_nonneg_qp(NonnegQp(Q, G[:, j]), tolerance=tolerance)
        Z[j] = sol.z
        free[j] = sol.z > tolerance
    if free_out is not None:
        free_out[...] = free
    return Z.T


def enumerate_oracle(problem, tolerance=DEFAULT_TOLERANCE):
    """Exact minimizer by enumerating all 2^n active sets (test oracle)."""
    n = problem.n
    if n > 20:
        raise ValueError(f"enumeration over 2^{n} active sets is too large")
    Q, g = problem.Q, problem.g
    if n == 0:
        return QpSolution(z=np.zeros(0), active_mask=0, kkt_residual=0.0,
                          iterations=0)
    slack = 1e-9
    best = None
    best_obj = np.inf
    for subset in range(1 << n):
        f = np.array([(subset >> i) & 1 for i in range(n)], dtype=bool)
        z = np.zeros(n)
        if f.any():
            idx = np.flatnonzero(f)
            try:
                z[idx] = np.linalg.solve(Q[np.ix_(idx, idx)], -g[idx])
            except np.linalg.LinAlgError:
                continue
            if np.min(z[idx]) < -slack:
                continue
        w = Q @ z + g
        if (~f).any() and np.min(w[~f]) < -slack:
            continue
        obj = problem.objective(np.maximum(z, 0.0))
        if obj < best_obj:
            best_obj = obj
            best = np.maximum(z, 0.0)
    if best is None:
        raise SolverError("enumeration found no feasible KKT point")
    return _solution(Q, g, best, 1 << n, tolerance)
