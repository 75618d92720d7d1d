"""Analytic derivatives of both losses checked against finite differences."""

import numpy as np
import pytest

from lcsid.data import sample_dataset
from lcsid.errors import DegenerateSolutionError
from lcsid.loss import (
    flatten_theta,
    inner_qp_matrix,
    inner_solve,
    inner_strict_fraction,
    n_flat,
    prediction_loss,
    prediction_loss_grad,
    regularizer,
    unflatten_theta,
    violation_loss,
    violation_loss_grad,
    violation_loss_hessian,
)
from lcsid.model import Dims, StiffnessSpec, random_lcs
from oracles import fd_gradient, rel_err

EPSILON = 1e-4
GAMMA = 1e-2


def make_instance(seed, dims=Dims(4, 2, 4), n=6, noise=0.05,
                  stiffness=1.0):
    """A (theta, dataset) pair where theta is NOT the generating system."""
    gen = random_lcs(dims, StiffnessSpec(stiffness), seed=seed)
    ds = sample_dataset(gen, n, noise_sigma=noise, seed=seed + 1)
    theta = random_lcs(dims, StiffnessSpec(stiffness), seed=seed + 2)
    return theta, ds


def test_flatten_roundtrip():
    theta, _ = make_instance(0)
    vec = flatten_theta(theta)
    assert vec.size == n_flat(theta.dims)
    back = unflatten_theta(vec, theta.dims)
    assert np.max(np.abs(flatten_theta(back) - vec)) < 1e-12
    assert np.max(np.abs(back.F - theta.F)) < 1e-12


def test_inner_qp_matrix_is_pd():
    theta, _ = make_instance(1)
    Q = inner_qp_matrix(theta, EPSILON, GAMMA)
    assert np.max(np.abs(Q - Q.T)) < 1e-9
    assert np.linalg.eigvalsh(Q)[0] > 0


def test_inner_solve_at_truth_is_tight():
    # for a noiseless transition of theta itself the exact LCP pair is
    # feasible with zero objective, so the inner minimum must be ~0
    theta = random_lcs(Dims(3, 1, 3), StiffnessSpec(1.0), seed=4)
    ds = sample_dataset(theta, 5, noise_sigma=0.0, seed=5)
    for tr in ds.transitions:
        sol = inner_solve(theta, tr, EPSILON, GAMMA)
        assert sol.objective < 1e-9
        assert abs(sol.comp_value) < 1e-9


def test_violation_loss_nonnegative_and_additive():
    theta, ds = make_instance(2)
    total = violation_loss(theta, ds, EPSILON, GAMMA)
    assert total >= 0
    parts = sum(inner_solve(theta, tr, EPSILON, GAMMA).objective
                for tr in ds.transitions)
    assert abs(total - parts) < 1e-7 * max(1.0, total)


def test_violation_gradient_matches_fd():
    worst = 0.0
    for seed in range(6):
        theta, ds = make_instance(10 + 3 * seed)
        grad = violation_loss_grad(theta, ds, EPSILON, GAMMA)
        vec0 = flatten_theta(theta)

        def f(v):
            return violation_loss(unflatten_theta(v, theta.dims), ds,
                                  EPSILON, GAMMA)

        fd = fd_gradient(f, vec0, step=1e-5)
        worst = max(worst, rel_err(grad.flat(), fd))
    assert worst < 1e-4, f"gradient relative error {worst:.2e}"


def test_pullback_matches_fd_in_gh_coordinates():
    from lcsid.model import FParam, LcsParams

    theta, ds = make_instance(7)
    grad = violation_loss_grad(theta, ds, EPSILON, GAMMA)
    n_l = theta.dims.n_lambda

    def loss_of_gh(v):
        G = v[: n_l * n_l].reshape(n_l, n_l, order="F")
        H = v[n_l * n_l:].reshape(n_l, n_l, order="F")
        fp = FParam(G=G, H=H, delta=theta.fparam.delta)
        th = LcsParams(A=theta.A, B=theta.B, C=theta.C, d=theta.d,
                       D=theta.D, E=theta.E, fparam=fp, c=theta.c)
        return violation_loss(th, ds, EPSILON, GAMMA)

    v0 = np.concatenate([theta.fparam.G.flatten(order="F"),
                         theta.fparam.H.flatten(order="F")])
    fd = fd_gradient(loss_of_gh, v0, step=1e-5)
    analytic = np.concatenate([grad.dG.flatten(order="F"),
                               grad.dH.flatten(order="F")])
    assert rel_err(analytic, fd) < 1e-4


def test_violation_hessian_matches_fd_of_gradient():
    dims = Dims(2, 1, 2)
    worst_err, worst_sym = 0.0, 0.0
    for seed in range(4):
        theta, ds = make_instance(40 + 5 * seed, dims=dims, n=4)
        if inner_strict_fraction(theta, ds, EPSILON, GAMMA) < 1.0:
            continue
        H = violation_loss_hessian(theta, ds, EPSILON, GAMMA).matrix
        sym = np.max(np.abs(H - H.T)) / max(1.0, np.max(np.abs(H)))
        worst_sym = max(worst_sym, sym)
        vec0 = flatten_theta(theta)
        p = vec0.size
        H_fd = np.zeros((p, p))
        step = 1e-6
        for i in range(p):
            vp, vm = vec0.copy(), vec0.copy()
            vp[i] += step
            vm[i] -= step
            gp = violation_loss_grad(unflatten_theta(vp, dims), ds,
                                     EPSILON, GAMMA).flat()
            gm = violation_loss_grad(unflatten_theta(vm, dims), ds,
                                     EPSILON, GAMMA).flat()
            H_fd[:, i] = (gp - gm) / (2 * step)
        worst_err = max(worst_err, rel_err(H, H_fd))
    assert worst_err < 1e-3, f"hessian relative error {worst_err:.2e}"
    assert worst_sym < 1e-8


def test_hessian_refuses_degenerate_samples():
    # D = E = c = 0 forces q = 0, so the exact fit has lam = phi = 0 with a
    # vanishing inner gradient: strict complementarity fails at every sample
    from lcsid.model import LcsParams

    base = random_lcs(Dims(2, 1, 2), StiffnessSpec(1.0), seed=3)
    theta = LcsParams(A=base.A, B=base.B, C=base.C, d=base.d,
                      D=np.zeros((2, 2)), E=np.zeros((2, 1)),
                      fparam=base.fparam, c=np.zeros(2))
    ds = sample_dataset(theta, 4, noise_sigma=0.0, seed=4)
    assert inner_strict_fraction(theta, ds, EPSILON, GAMMA) == 0.0
    with pytest.raises(DegenerateSolutionError):
        violation_loss_hessian(theta, ds, EPSILON, GAMMA)


def test_prediction_loss_zero_at_truth():
    theta = random_lcs(Dims(3, 2, 3), StiffnessSpec(1.0), seed=6)
    ds = sample_dataset(theta, 20, noise_sigma=0.0, seed=7)
    value, preds = prediction_loss(theta, ds)
    assert value < 1e-12
    assert np.max(np.abs(preds - ds.x_nexts)) < 1e-7


def test_prediction_gradient_matches_fd():
    worst = 0.0
    for seed in range(5):
        theta, ds = make_instance(60 + 7 * seed, n=5)
        grad, degenerate = prediction_loss_grad(theta, ds)
        if degenerate:
            continue
        vec0 = flatten_theta(theta)

        def f(v):
            return prediction_loss(unflatten_theta(v, theta.dims), ds)[0]

        fd = fd_gradient(f, vec0, step=1e-6)
        worst = max(worst, rel_err(grad.flat(), fd))
    assert worst < 1e-4, f"prediction gradient relative error {worst:.2e}"


def test_violation_loss_lower_bounds_prediction_loss():
    # the exact LCP pair is feasible for the inner problem with zero
    # penalty, so the violation loss can never exceed the prediction loss
    for seed in range(8):
        theta, ds = make_instance(90 + seed, n=30)
        lv = violation_loss(theta, ds, EPSILON, GAMMA)
        lp = prediction_loss(theta, ds, gamma=GAMMA)[0]
        assert lv <= lp + 1e-8 * (1 + lp)


def test_gap_shrinks_with_epsilon():
    theta, ds = make_instance(123, n=25)
    lp = prediction_loss(theta, ds, gamma=GAMMA)[0]
    gaps = [lp - violation_loss(theta, ds, eps, GAMMA)
            for eps in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)]
    assert all(g >= -1e-8 * (1 + lp) for g in gaps)
    assert all(gaps[i + 1] <= gaps[i] + 1e-9 * (1 + lp)
               for i in range(len(gaps) - 1))


def test_regularizer_value_and_gradient():
    theta, _ = make_instance(5)
    omega = 1e-5
    value, grad = regularizer(theta, omega)
    assert abs(value - omega * np.sum(theta.C ** 2)) < 1e-15
    assert np.max(np.abs(grad.dC - 2 * omega * theta.C)) < 1e-15
    assert np.max(np.abs(grad.dA)) == 0
    with pytest.raises(ValueError):
        regularizer(theta, -1.0)


def test_no_complementarity_reduces_to_least_squares():
    theta = random_lcs(Dims(3, 2, 0), StiffnessSpec(1.0), seed=9)
    ds = sample_dataset(theta, 15, noise_sigma=0.1, seed=10)
    resid = (theta.A @ ds.xs.T + theta.B @ ds.us.T + theta.d[:, None]
             - ds.x_nexts.T)
    expected = 0.5 * np.sum(resid * resid)
    assert abs(violation_loss(theta, ds, EPSILON, GAMMA) - expected) < 1e-9
    assert abs(prediction_loss(theta, ds)[0] - expected) < 1e-12
