"""LCP solving via the proxy-variable QP, plus solution sensitivities.

For F with F + F^T positive definite, lcp(F, q) is recovered as the unique
minimizer of

    min_{lambda >= 0, phi >= 0}  lambda^T phi + (1/(2 gamma)) ||F lambda + q - phi||^2

for any 0 < gamma < min-eig(F + F^T).  Only non-negativity constraints
appear, so the qp kernel serves directly on the stacked variable
z = (lambda, phi).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSolutionError, GammaWindowError, SolverError
from .qp import DEFAULT_TOLERANCE, NonnegQp, solve_nonneg_qp, solve_nonneg_qp_multi

STRICTNESS_THRESHOLD = 1e-6
SENSITIVITY_COND_LIMIT = 1e12


@dataclass(frozen=True)
class LcpSolution:
    """Solution of lambda in lcp(F, q) with slack phi = F lambda + q."""

    lam: np.ndarray
    phi: np.ndarray
    mode: int                 # bit i set iff lam[i] > phi[i]
    strict: bool
    min_gap: float            # min_i max(lam[i], phi[i])
    comp_residual: float      # max_i lam[i] * phi[i]


def min_eig_symmetric_part(F):
    """Smallest eigenvalue of F + F^T (0-dimensional F gives +inf)."""
    F = np.asarray(F, dtype=float)
    if F.shape[0] == 0:
        return np.inf
    return float(np.linalg.eigvalsh(F + F.T)[0])


def _check_gamma(gamma, min_eig):
    if gamma is None:
        if not np.isfinite(min_eig):
            return 1.0
        gamma = 0.5 * min_eig
    if not (0.0 < gamma < min_eig):
        raise GammaWindowError(gamma, min_eig)
    return float(gamma)


def proxy_qp(F, q, gamma):
    """Quadratic data of the proxy problem over z = (lambda, phi)."""
    F = np.asarray(F, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    eye = np.eye(n)
    inv_g = 1.0 / gamma
    Q = np.block([
        [inv_g * F.T @ F, eye - inv_g * F.T],
        [eye - inv_g * F, inv_g * eye],
    ])
    g = inv_g * np.concatenate([F.T @ q, -q])
    constant = 0.5 * inv_g * float(q @ q)
    return Q, g, constant


def _make_solution(lam, phi, strictness_threshold):
    n = lam.size
    mode = 0
    for i in range(n):
        if lam[i] > phi[i]:
            mode |= 1 << i
    min_gap = float(np.min(np.maximum(lam, phi))) if n else np.inf
    comp = float(np.max(lam * phi)) if n else 0.0
    return LcpSolution(
        lam=lam,
        phi=phi,
        mode=mode,
        strict=min_gap > strictness_threshold,
        min_gap=min_gap,
        comp_residual=comp,
    )


def solve_lcp(F, q, gamma=None, tolerance=DEFAULT_TOLERANCE,
              strictness_threshold=STRICTNESS_THRESHOLD):
    """Solve lcp(F, q); gamma defaults to 0.5 * min-eig(F + F^T)."""
    F = np.asarray(F, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    if n == 0:
        return _make_solution(np.zeros(0), np.zeros(0), strictness_threshold)
    gamma = _check_gamma(gamma, min_eig_symmetric_part(F))
    Q, g, constant = proxy_qp(F, q, gamma)
    sol = solve_nonneg_qp(NonnegQp(Q, g, constant), tolerance=tolerance)
    lam = sol.z[:n]
    phi = sol.z[n:]
    return _make_solution(lam, phi, strictness_threshold)


def solve_lcp_batch(F, q_columns, gamma=None, tolerance=DEFAULT_TOLERANCE,
                    free0=None, free_out=None):
    """Solve lcp(F, q) for every column of q_columns; returns (Lam, Phi).

    `free0` / `free_out` warm-start the underlying QP active sets across
    repeated calls; they never change the solutions.
    """
    F = np.asarray(F, dtype=float)
    q_columns = np.asarray(q_columns, dtype=float)
    n, m = q_columns.shape
    if n == 0:
        return np.zeros((0, m)), np.zeros((0, m))
    gamma = _check_gamma(gamma, min_eig_symmetric_part(F))
    eye = np.eye(n)
    inv_g = 1.0 / gamma
    Q = np.block([
        [inv_g * F.T @ F, eye - inv_g * F.T],
        [eye - inv_g * F, inv_g * eye],
    ])
    G = inv_g * np.vstack([F.T @ q_columns, -q_columns])
    Z = solve_nonneg_qp_multi(Q, G, tolerance=tolerance, free0=free0,
                              free_out=free_out)
    return Z[:n], Z[n:]


def classify_strict(sol, threshold=STRICTNESS_THRESHOLD):
    """True iff every index has max(lam[i], phi[i]) above the threshold."""
    if sol.lam.size == 0:
        return True
    return bool(np.min(np.maximum(sol.lam, sol.phi)) > threshold)


def lcp_sensitivity(F, q, sol, cond_limit=SENSITIVITY_COND_LIMIT,
                    strictness_threshold=STRICTNESS_THRESHOLD):
    """J = d lambda / d q at a strictly complementary solution.

    From diag(lambda) (F lambda + q) = 0, differentiation gives
    S d lambda = -diag(lambda) dq with S = diag(F lambda + q) + diag(lambda) F,
    hence J = -S^{-1} diag(lambda).  Sensitivities w.r.t. D, E, F, c follow
    by the chain rule through dq = dD x + dE u + dF lambda + dc.
    """
    F = np.asarray(F, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    if n == 0:
        return np.zeros((0, 0))
    if not classify_strict(sol, strictness_threshold):
        raise DegenerateSolutionError(
            "LCP solution is not strictly complementary; sensitivity undefined"
        )
    lam = sol.lam
    phi = F @ lam + q
    S = np.diag(phi) + np.diag(lam) @ F
    if np.linalg.cond(S) > cond_limit:
        raise SolverError(
            f"sensitivity system is near-singular (cond > {cond_limit:.0e})"
        )
    return -np.linalg.solve(S, np.diag(lam))
