"""Prediction-based and violation-based losses with analytic derivatives.

The violation loss replaces the exact LCP solve by an inner strongly-convex
QP over proxy variables z = (lambda, phi) >= 0; its gradient needs no linear
solves (envelope theorem) and its Hessian has a closed form with a
Schur-type correction through the inner KKT system.  The prediction loss
solves the LCP exactly and differentiates it implicitly.

Canonical flattening of theta: blocks A, B, C, d, D, E, F, c in that order,
each column-major.  Gradients are additionally pulled back to the (G, H)
coordinates of the F factorization.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSolutionError, GammaWindowError, SolverError
from .lcp import (
    STRICTNESS_THRESHOLD,
    min_eig_symmetric_part,
    solve_lcp_batch,
)
from .model import LcsParams, fparam_from_f
from .qp import DEFAULT_TOLERANCE, NonnegQp, solve_nonneg_qp, solve_nonneg_qp_multi


# --- canonical flattening ----------------------------------------------------

def block_shapes(dims):
    n_x, n_u, n_l = dims.n_x, dims.n_u, dims.n_lambda
    return [
        ("A", (n_x, n_x)), ("B", (n_x, n_u)), ("C", (n_x, n_l)), ("d", (n_x,)),
        ("D", (n_l, n_x)), ("E", (n_l, n_u)), ("F", (n_l, n_l)), ("c", (n_l,)),
    ]


def n_flat(dims):
    return sum(int(np.prod(shape)) for _, shape in block_shapes(dims))


def flatten_theta(theta):
    """Canonical flat vector over (A, B, C, d, D, E, F, c), column-major."""
    blocks = [theta.A, theta.B, theta.C, theta.d, theta.D, theta.E,
              theta.F, theta.c]
    return np.concatenate([np.asarray(b).flatten(order="F") for b in blocks])


def unflatten_theta(vec, dims, delta=0.0):
    """Inverse of flatten_theta; the raw F block is refactored into (G, H)."""
    out = {}
    offset = 0
    for name, shape in block_shapes(dims):
        size = int(np.prod(shape))
        out[name] = vec[offset:offset + size].reshape(shape, order="F")
        offset += size
    return LcsParams(
        A=out["A"], B=out["B"], C=out["C"], d=out["d"],
        D=out["D"], E=out["E"], fparam=fparam_from_f(out["F"], delta=delta),
        c=out["c"],
    )


@dataclass
class LossGradient:
    dA: np.ndarray
    dB: np.ndarray
    dC: np.ndarray
    dd: np.ndarray
    dD: np.ndarray
    dE: np.ndarray
    dF: np.ndarray
    dc: np.ndarray
    dG: np.ndarray
    dH: np.ndarray

    @classmethod
    def zeros(cls, dims):
        n_x, n_u, n_l = dims.n_x, dims.n_u, dims.n_lambda
        return cls(
            dA=np.zeros((n_x, n_x)), dB=np.zeros((n_x, n_u)),
            dC=np.zeros((n_x, n_l)), dd=np.zeros(n_x),
            dD=np.zeros((n_l, n_x)), dE=np.zeros((n_l, n_u)),
            dF=np.zeros((n_l, n_l)), dc=np.zeros(n_l),
            dG=np.zeros((n_l, n_l)), dH=np.zeros((n_l, n_l)),
        )

    def apply_pullback(self, fparam):
        """Chain rule through F = G G^T + delta I + H - H^T."""
        self.dG = (self.dF + self.dF.T) @ fparam.G
        self.dH = self.dF - self.dF.T
        return self

    def add(self, other):
        for name in ("dA", "dB", "dC", "dd", "dD", "dE", "dF", "dc",
                     "dG", "dH"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def flat(self):
        """Canonical flattening aligned with flatten_theta (raw F block)."""
        blocks = [self.dA, self.dB, self.dC, self.dd, self.dD, self.dE,
                  self.dF, self.dc]
        return np.concatenate([np.asarray(b).flatten(order="F")
                               for b in blocks])

    def flat_trainable(self):
        """Flattening over the trained coordinates (A,B,C,d,D,E,G,H,c)."""
        blocks = [self.dA, self.dB, self.dC, self.dd, self.dD, self.dE,
                  self.dG, self.dH, self.dc]
        return np.concatenate([np.asarray(b).flatten(order="F")
                               for b in blocks])


@dataclass(frozen=True)
class LossHessian:
    """Dense Hessian over the canonical flattening (raw F block)."""

    matrix: np.ndarray
    dims: object


@dataclass(frozen=True)
class InnerSolution:
    lam: np.ndarray
    phi: np.ndarray
    dyn_residual: np.ndarray   # A x + B u + C lam + d - x_next
    lcp_gap: np.ndarray        # D x + E u + F lam + c - phi
    comp_value: float          # lam^T phi
    objective: float


# --- inner QP assembly -------------------------------------------------------

def _require_gamma(theta, gamma):
    min_eig = theta.min_eig_f_sym()
    if not (0.0 < gamma < min_eig):
        raise GammaWindowError(gamma, min_eig)
    return min_eig


def inner_qp_matrix(theta, epsilon, gamma):
    """Hessian of the per-sample inner objective over z = (lambda, phi)."""
    F, C = theta.F, theta.C
    n_l = F.shape[0]
    a = 1.0 / (epsilon * gamma)
    Q = np.zeros((2 * n_l, 2 * n_l))
    Q[:n_l, :n_l] = C.T @ C + a * F.T @ F
    top_right = -a * F.T
    top_right[np.diag_indices(n_l)] += 1.0 / epsilon
    Q[:n_l, n_l:] = top_right
    Q[n_l:, :n_l] = top_right.T
    Q[n_l:, n_l:][np.diag_indices(n_l)] = a
    return Q


def _inner_linear_terms(theta, dataset, epsilon, gamma):
    """Per-sample linear terms of the inner QP, one column per transition."""
    xs, us, xns = dataset.xs.T, dataset.us.T, dataset.x_nexts.T
    r0 = theta.A @ xs + theta.B @ us + theta.d[:, None] - xns
    q = theta.D @ xs + theta.E @ us + theta.c[:, None]
    a = 1.0 / (epsilon * gamma)
    G = np.vstack([theta.C.T @ r0 + a * (theta.F.T @ q), -a * q])
    const = 0.5 * np.einsum("ij,ij->j", r0, r0) + 0.5 * a * np.einsum(
        "ij,ij->j", q, q)
    return G, const, r0, q


def _solve_inner_batch(theta, dataset, epsilon, gamma,
                       tolerance=DEFAULT_TOLERANCE, check_window=True,
                       free0=None, free_out=None):
    # check_window=False still demands positive definiteness of the inner
    # QP (Cholesky below); it only skips the strict gamma-window test so a
    # fixed-gamma trainer can proceed while logging the violation.
    if check_window:
        _require_gamma(theta, gamma)
    n_l = theta.dims.n_lambda
    G, const, r0, q = _inner_linear_terms(theta, dataset, epsilon, gamma)
    if n_l == 0:
        N = len(dataset)
        return (np.zeros((0, N)), np.zeros((0, N)), r0, q, const)
    Q = inner_qp_matrix(theta, epsilon, gamma)
    try:
        np.linalg.cholesky(Q + 1e-15 * np.eye(Q.shape[0]))
    except np.linalg.LinAlgError:
        raise SolverError("inner QP matrix is not positive definite") from None
    Z = solve_nonneg_qp_multi(Q, G, tolerance=tolerance, free0=free0,
                              free_out=free_out)
    return Z[:n_l], Z[n_l:], r0, q, const


def _inner_objectives(theta, lam, phi, r0, q, epsilon, gamma):
    e_dyn = theta.C @ lam + r0
    gap = theta.F @ lam + q - phi
    comp = np.einsum("ij,ij->j", lam, phi)
    obj = (
        0.5 * np.einsum("ij,ij->j", e_dyn, e_dyn)
        + (1.0 / epsilon) * (comp + 0.5 / gamma * np.einsum(
            "ij,ij->j", gap, gap))
    )
    return obj, e_dyn, gap, comp


def inner_solve(theta, transition, epsilon, gamma,
                tolerance=DEFAULT_TOLERANCE):
    """Solve the violation inner QP for one transition."""
    from .data import Dataset  # local import to avoid a cycle

    ds = Dataset(dims=theta.dims, xs=transition.x[None, :],
                 us=transition.u[None, :], x_nexts=transition.x_next[None, :])
    lam, phi, r0, q, _ = _solve_inner_batch(theta, ds, epsilon, gamma,
                                            tolerance)
    obj, e_dyn, gap, comp = _inner_objectives(theta, lam, phi, r0, q,
                                              epsilon, gamma)
    return InnerSolution(
        lam=lam[:, 0], phi=phi[:, 0], dyn_residual=e_dyn[:, 0],
        lcp_gap=gap[:, 0], comp_value=float(comp[0]),
        objective=float(obj[0]),
    )


def violation_loss(theta, dataset, epsilon, gamma,
                   tolerance=DEFAULT_TOLERANCE):
    """Sum of inner-QP optimal values; the regularizer is not included."""
    lam, phi, r0, q, _ = _solve_inner_batch(theta, dataset, epsilon, gamma,
                                            tolerance)
    obj, _, _, _ = _inner_objectives(theta, lam, phi, r0, q, epsilon, gamma)
    return float(np.sum(obj))


def _violation_value_and_grad(theta, dataset, epsilon, gamma,
                              tolerance=DEFAULT_TOLERANCE, check_window=True,
                              free0=None, free_out=None):
    lam, phi, r0, q, _ = _solve_inner_batch(theta, dataset, epsilon, gamma,
                                            tolerance,
                                            check_window=check_window,
                                            free0=free0, free_out=free_out)
    obj, e_dyn, gap, _ = _inner_objectives(theta, lam, phi, r0, q,
                                           epsilon, gamma)
    xs, us = dataset.xs, dataset.us
    e_lcp = gap / (epsilon * gamma)
    grad = LossGradient.zeros(theta.dims)
    grad.dA = e_dyn @ xs
    grad.dB = e_dyn @ us
    grad.dC = e_dyn @ lam.T
    grad.dd = e_dyn.sum(axis=1)
    grad.dD = e_lcp @ xs
    grad.dE = e_lcp @ us
    grad.dF = e_lcp @ lam.T
    grad.dc = e_lcp.sum(axis=1)
    grad.apply_pullback(theta.fparam)
    # strictness of the inner KKT point, for degeneracy statistics
    strict = _strict_mask(theta, lam, phi, e_dyn, gap, epsilon, gamma)
    return float(np.sum(obj)), grad, strict


def violation_loss_grad(theta, dataset, epsilon, gamma,
                        tolerance=DEFAULT_TOLERANCE):
    """Analytic gradient of the violation loss (no linear-system solves)."""
    _, grad, _ = _violation_value_and_grad(theta, dataset, epsilon, gamma,
                                           tolerance)
    return grad


def _inner_grad_z(theta, lam, phi, e_dyn, gap, epsilon, gamma):
    a = 1.0 / (epsilon * gamma)
    g_lam = theta.C.T @ e_dyn + phi / epsilon + a * (theta.F.T @ gap)
    g_phi = lam / epsilon - a * gap
    return np.vstack([g_lam, g_phi])


def _strict_mask(theta, lam, phi, e_dyn, gap, epsilon, gamma,
                 threshold=STRICTNESS_THRESHOLD):
    """Per-sample strict complementarity of the inner KKT point."""
    if lam.shape[0] == 0:
        return np.ones(lam.shape[1], dtype=bool)
    z = np.vstack([lam, phi])
    gz = _inner_grad_z(theta, lam, phi, e_dyn, gap, epsilon, gamma)
    return np.min(np.maximum(z, gz), axis=0) > threshold


def inner_strict_fraction(theta, dataset, epsilon, gamma,
                          tolerance=DEFAULT_TOLERANCE):
    """Fraction of samples whose inner solution is strictly complementary."""
    lam, phi, r0, q, _ = _solve_inner_batch(theta, dataset, epsilon, gamma,
                                            tolerance)
    _, e_dyn, gap, _ = _inner_objectives(theta, lam, phi, r0, q,
                                         epsilon, gamma)
    return float(np.mean(_strict_mask(theta, lam, phi, e_dyn, gap,
                                      epsilon, gamma)))


def violation_loss_hessian(theta, dataset, epsilon, gamma,
                           tolerance=DEFAULT_TOLERANCE):
    """Analytic Hessian over the canonical flattening of theta.

    Per sample: the explicit theta-theta block of the inner objective minus
    the correction through the inner KKT system, inverted by dense
    factorization.  Requires every inner solution strictly complementary.
    """
    dims = theta.dims
    n_x, n_u, n_l = dims.n_x, dims.n_u, dims.n_lambda
    p = n_flat(dims)
    lam_b, phi_b, r0_b, q_b, _ = _solve_inner_batch(theta, dataset, epsilon,
                                                    gamma, tolerance)
    _, e_dyn_b, gap_b, _ = _inner_objectives(theta, lam_b, phi_b, r0_b, q_b,
                                             epsilon, gamma)
    strict = _strict_mask(theta, lam_b, phi_b, e_dyn_b, gap_b, epsilon, gamma)
    if not strict.all():
        bad = np.flatnonzero(~strict)
        raise DegenerateSolutionError(
            f"inner solutions at samples {bad.tolist()[:10]} are degenerate; "
            "Hessian refused"
        )

    a = 1.0 / (epsilon * gamma)
    eye_x = np.eye(n_x)
    eye_l = np.eye(n_l)
    Hzz = np.block([
        [theta.C.T @ theta.C + a * theta.F.T @ theta.F,
         (1.0 / epsilon) * eye_l - a * theta.F.T],
        [(1.0 / epsilon) * eye_l - a * theta.F, a * eye_l],
    ]) if n_l else np.zeros((0, 0))

    # canonical block column offsets
    offsets = {}
    pos = 0
    for name, shape in block_shapes(dims):
        offsets[name] = pos
        pos += int(np.prod(shape))

    H = np.zeros((p, p))
    for t in range(len(dataset)):
        x, u = dataset.xs[t], dataset.us[t]
        lam, phi = lam_b[:, t], phi_b[:, t]
        e_dyn, gap = e_dyn_b[:, t], gap_b[:, t]

        J_dyn = np.zeros((n_x, p))
        J_dyn[:, offsets["A"]:offsets["A"] + n_x * n_x] = np.kron(
            x[None, :], eye_x)
        if n_u:
            J_dyn[:, offsets["B"]:offsets["B"] + n_x * n_u] = np.kron(
                u[None, :], eye_x)
        if n_l:
            J_dyn[:, offsets["C"]:offsets["C"] + n_x * n_l] = np.kron(
                lam[None, :], eye_x)
        J_dyn[:, offsets["d"]:offsets["d"] + n_x] = eye_x

        J_lcp = np.zeros((n_l, p))
        if n_l:
            J_lcp[:, offsets["D"]:offsets["D"] + n_l * n_x] = np.kron(
                x[None, :], eye_l)
            if n_u:
                J_lcp[:, offsets["E"]:offsets["E"] + n_l * n_u] = np.kron(
                    u[None, :], eye_l)
            J_lcp[:, offsets["F"]:offsets["F"] + n_l * n_l] = np.kron(
                lam[None, :], eye_l)
            J_lcp[:, offsets["c"]:offsets["c"] + n_l] = eye_l

        H += J_dyn.T @ J_dyn + a * (J_lcp.T @ J_lcp)
        if n_l == 0:
            continue

        # mixed second derivatives d/dtheta of dl/dz
        Hz_theta = np.zeros((2 * n_l, p))
        Hz_theta[:n_l] = theta.C.T @ J_dyn + a * (theta.F.T @ J_lcp)
        Hz_theta[:n_l, offsets["C"]:offsets["C"] + n_x * n_l] += np.kron(
            eye_l, e_dyn[None, :])
        Hz_theta[:n_l, offsets["F"]:offsets["F"] + n_l * n_l] += a * np.kron(
            eye_l, gap[None, :])
        Hz_theta[n_l:] = -a * J_lcp

        z = np.concatenate([lam, phi])
        gz = _inner_grad_z(theta, lam[:, None], phi[:, None],
                           e_dyn[:, None], gap[:, None], epsilon, gamma)[:, 0]
        M = np.diag(gz) + np.diag(z) @ Hzz
        try:
            X = np.linalg.solve(M, z[:, None] * Hz_theta)
        except np.linalg.LinAlgError:
            raise SolverError(
                f"inner correction matrix singular at sample {t}"
            ) from None
        H -= Hz_theta.T @ X
    return LossHessian(matrix=H, dims=dims)


# --- prediction loss ---------------------------------------------------------

def prediction_loss(theta, dataset, gamma=None, tolerance=DEFAULT_TOLERANCE):
    """0.5 sum ||x_pred - x_next||^2 with lambda from the exact LCP solve."""
    xs, us, xns = dataset.xs.T, dataset.us.T, dataset.x_nexts.T
    q = theta.D @ xs + theta.E @ us + theta.c[:, None]
    lam, _ = solve_lcp_batch(theta.F, q, gamma=gamma, tolerance=tolerance)
    preds = theta.A @ xs + theta.B @ us + theta.C @ lam + theta.d[:, None]
    resid = preds - xns
    return float(0.5 * np.sum(resid * resid)), preds.T


def _prediction_value_and_grad(theta, dataset, gamma=None,
                               strictness_threshold=STRICTNESS_THRESHOLD,
                               tolerance=DEFAULT_TOLERANCE,
                               cond_limit=1e12, free0=None, free_out=None):
    xs, us, xns = dataset.xs.T, dataset.us.T, dataset.x_nexts.T
    F = theta.F
    q = theta.D @ xs + theta.E @ us + theta.c[:, None]
    lam, phi_qp = solve_lcp_batch(F, q, gamma=gamma, tolerance=tolerance,
                                  free0=free0, free_out=free_out)
    preds = theta.A @ xs + theta.B @ us + theta.C @ lam + theta.d[:, None]
    resid = preds - xns
    value = float(0.5 * np.sum(resid * resid))

    dims = theta.dims
    n_l = dims.n_lambda
    grad = LossGradient.zeros(dims)
    N = len(dataset)
    if n_l == 0:
        keep = np.ones(N, dtype=bool)
        degenerate = 0
        v = np.zeros((0, N))
    else:
        phi = F @ lam + q
        keep = np.min(np.maximum(lam, phi), axis=0) > strictness_threshold
        degenerate = int(N - keep.sum())
        v = np.zeros((n_l, N))
        if keep.any():
            idx = np.flatnonzero(keep)
            # S_t^T y = C^T r, then v = -lam * y   (J^T C^T r with
            # J = -S^{-1} diag(lam))
            S = (phi[:, idx].T[:, :, None] * np.eye(n_l)[None]
                 + lam[:, idx].T[:, :, None] * F[None])
            conds = np.linalg.cond(S)
            ok = conds <= cond_limit
            degenerate += int((~ok).sum())
            keep[idx[~ok]] = False
            idx = idx[ok]
            if idx.size:
                rhs = (theta.C.T @ resid[:, idx]).T[:, :, None]
                y = np.linalg.solve(np.transpose(S[ok], (0, 2, 1)), rhs)[..., 0]
                v[:, idx] = -lam[:, idx] * y.T
    if degenerate == N:
        raise DegenerateSolutionError(
            "every sample is degenerate; prediction gradient undefined"
        )
    r_kept = resid * keep
    v_kept = v * keep
    grad.dA = r_kept @ xs.T
    grad.dB = r_kept @ us.T
    grad.dC = r_kept @ lam.T
    grad.dd = r_kept.sum(axis=1)
    grad.dD = v_kept @ xs.T
    grad.dE = v_kept @ us.T
    grad.dF = v_kept @ lam.T
    grad.dc = v_kept.sum(axis=1)
    grad.apply_pullback(theta.fparam)
    return value, grad, degenerate


def prediction_loss_grad(theta, dataset, gamma=None,
                         strictness_threshold=STRICTNESS_THRESHOLD,
                         tolerance=DEFAULT_TOLERANCE):
    """Implicit-differentiation gradient; degenerate samples are skipped."""
    _, grad, degenerate = _prediction_value_and_grad(
        theta, dataset, gamma, strictness_threshold, tolerance)
    return grad, degenerate


# --- regularizer -------------------------------------------------------------

def regularizer(theta, omega):
    """R(theta) = omega * ||C||_F^2 against permutation/scaling ambiguity."""
    if omega < 0:
        raise ValueError("omega must be non-negative")
    grad = LossGradient.zeros(theta.dims)
    grad.dC = 2.0 * omega * theta.C
    return float(omega * np.sum(theta.C * theta.C)), grad
