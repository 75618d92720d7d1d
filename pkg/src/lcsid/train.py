"""Adam minimization of (loss + regularizer) in (G, H) coordinates.

The trained vector stacks A, B, C, d, D, E, G, H, c (column-major per
block); F is materialized from (G, H, delta) every step, so the stiffness
floor min-eig(F + F^T) >= 2 delta holds at every iterate by construction.
Sequential training is bit-reproducible given (init_seed, shuffle_seed) and
the dataset.
"""

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import GammaWindowError, SolverError
from .loss import (
    _prediction_value_and_grad,
    _violation_value_and_grad,
    prediction_loss,
    regularizer,
    violation_loss,
)
from .model import DEFAULT_DELTA, FParam, LcsParams

METHODS = ("prediction", "violation")
GAMMA_POLICIES = ("fixed", "clamp")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "violation"
    epsilon: float = 1e-4
    gamma: float = 1e-2
    omega: float = 1e-5
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.9
    adam_epsilon: float = 1e-6
    batch_size: int = 200
    max_iterations: int = 20_000
    init_seed: int = 0
    shuffle_seed: int = 0
    gamma_policy: str = "fixed"
    delta: float = DEFAULT_DELTA
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.gamma_policy not in GAMMA_POLICIES:
            raise ValueError(f"gamma_policy must be one of {GAMMA_POLICIES}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.gamma <= 0:
            raise ValueError("learning_rate, epsilon, gamma must be positive")
        if self.batch_size < 1 or self.max_iterations < 1:
            raise ValueError("batch_size and max_iterations must be >= 1")
        if self.delta < 0 or self.omega < 0:
            raise ValueError("delta and omega must be non-negative")


@dataclass(frozen=True)
class HistoryRecord:
    iteration: int
    batch_loss: float
    full_loss: float          # nan except at checkpoints
    gamma_violation: int      # 1 if gamma >= min-eig(F+F^T) this step
    degenerate_count: int     # skipped samples (prediction) / skipped batch
    elapsed_seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    skipped_batches: int = 0

    def append(self, record):
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("iteration index must be monotone")
        self.records.append(record)


HISTORY_COLUMNS = ("iteration", "batch_loss", "full_loss", "gamma_violation",
                   "degenerate_count", "elapsed_seconds")


def write_history(history, path, fixed_timing=False):
    def fmt(v):
        return format(float(v), ".17g")

    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in history.records:
            elapsed = 0.0 if fixed_timing else r.elapsed_seconds
            fh.write(",".join([
                str(r.iteration), fmt(r.batch_loss), fmt(r.full_loss),
                str(r.gamma_violation), str(r.degenerate_count), fmt(elapsed),
            ]) + "\n")


# --- parameter vector <-> LcsParams over the trained coordinates -------------

def trainable_shapes(dims):
    n_x, n_u, n_l = dims.n_x, dims.n_u, dims.n_lambda
    return [
        ("A", (n_x, n_x)), ("B", (n_x, n_u)), ("C", (n_x, n_l)), ("d", (n_x,)),
        ("D", (n_l, n_x)), ("E", (n_l, n_u)), ("G", (n_l, n_l)),
        ("H", (n_l, n_l)), ("c", (n_l,)),
    ]


def pack_trainable(theta):
    blocks = [theta.A, theta.B, theta.C, theta.d, theta.D, theta.E,
              theta.fparam.G, theta.fparam.H, theta.c]
    return np.concatenate([np.asarray(b).flatten(order="F") for b in blocks])


@lru_cache(maxsize=None)
def _trainable_layout(dims):
    layout = []
    offset = 0
    for name, shape in trainable_shapes(dims):
        size = 1
        for s in shape:
            size *= s
        layout.append((name, shape, offset, offset + size))
        offset += size
    return tuple(layout)


def unpack_trainable(vec, dims, delta):
    out = {}
    for name, shape, start, stop in _trainable_layout(dims):
        out[name] = vec[start:stop].reshape(shape, order="F")
    return LcsParams(
        A=out["A"], B=out["B"], C=out["C"], d=out["d"], D=out["D"],
        E=out["E"], fparam=FParam(G=out["G"], H=out["H"], delta=delta),
        c=out["c"],
    )


def init_params(dims, seed, delta=DEFAULT_DELTA):
    """All trained blocks (including G, H) i.i.d. uniform on [-1, 1]."""
    rng = np.random.default_rng(seed)
    n_x, n_u, n_l = dims.n_x, dims.n_u, dims.n_lambda
    uni = lambda *shape: rng.uniform(-1.0, 1.0, shape)
    return LcsParams(
        A=uni(n_x, n_x), B=uni(n_x, n_u), C=uni(n_x, n_l), d=uni(n_x),
        D=uni(n_l, n_x), E=uni(n_l, n_u),
        fparam=FParam(G=uni(n_l, n_l), H=uni(n_l, n_l), delta=delta),
        c=uni(n_l),
    )


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(m=np.zeros(size), v=np.zeros(size), t=0)


def adam_step(params_flat, grad_flat, state, config):
    """Standard bias-corrected Adam update; returns (params, state)."""
    if params_flat.shape != grad_flat.shape:
        raise ValueError("parameter and gradient shapes disagree")
    if not np.isfinite(grad_flat).all():
        raise SolverError("non-finite gradient encountered; aborting")
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad_flat
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad_flat ** 2
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    updated = params_flat - config.learning_rate * m_hat / (
        np.sqrt(v_hat) + config.adam_epsilon)
    return updated, AdamState(m=m, v=v, t=t)


def _full_loss(theta, dataset, config, gamma_eff):
    try:
        if config.method == "violation":
            return violation_loss(theta, dataset, config.epsilon, gamma_eff)
        return prediction_loss(theta, dataset, gamma=gamma_eff)[0]
    except (GammaWindowError, SolverError):
        return np.nan


def train(dataset, config):
    """Minibatch Adam over shuffled epochs; returns (params, history)."""
    dims = dataset.dims
    theta = init_params(dims, config.init_seed, delta=config.delta)
    vec = pack_trainable(theta)
    state = AdamState.zeros(vec.size)
    history = TrainHistory()
    shuffle_rng = np.random.default_rng(config.shuffle_seed)
    N = len(dataset)
    batch = min(config.batch_size, N)
    # per-sample warm-start masks for the inner QP active sets; they only
    # seed the solver, so results are identical to a cold start
    warm = np.zeros((N, 2 * dims.n_lambda), dtype=bool)
    order = shuffle_rng.permutation(N)
    cursor = 0
    start = time.perf_counter()

    for it in range(config.max_iterations):
        if cursor + batch > N:
            order = shuffle_rng.permutation(N)
            cursor = 0
        idx = order[cursor:cursor + batch]
        cursor += batch
        minibatch = dataset.subset(idx)

        theta = unpack_trainable(vec, dims, config.delta)
        min_eig = theta.min_eig_f_sym()
        if min_eig < 2.0 * config.delta - 1e-12:
            raise SolverError(
                "reparameterization violated the stiffness floor"
            )
        if config.gamma_policy == "clamp":
            gamma_eff = min(config.gamma, 0.9 * min_eig)
        else:
            gamma_eff = config.gamma
        violated = int(gamma_eff >= min_eig)

        degenerate = 0
        skipped = False
        if config.method == "violation":
            if violated and not _inner_pd(theta, config.epsilon, gamma_eff):
                skipped = True
            else:
                masks = warm[idx]
                batch_loss, grad, _ = _violation_value_and_grad(
                    theta, minibatch, config.epsilon, gamma_eff,
                    check_window=not violated, free0=masks, free_out=masks)
                warm[idx] = masks
        else:
            if violated:
                skipped = True
            else:
                masks = warm[idx]
                batch_loss, grad, degenerate = _prediction_value_and_grad(
                    theta, minibatch, gamma=gamma_eff,
                    free0=masks, free_out=masks)
                warm[idx] = masks

        if skipped:
            history.skipped_batches += 1
            history.append(HistoryRecord(
                iteration=it, batch_loss=np.nan, full_loss=np.nan,
                gamma_violation=violated, degenerate_count=batch,
                elapsed_seconds=time.perf_counter() - start))
            continue

        reg_value, reg_grad = regularizer(theta, config.omega)
        grad.add(reg_grad.apply_pullback(theta.fparam))
        vec, state = adam_step(vec, grad.flat_trainable(), state, config)

        full = np.nan
        if config.checkpoint_every and (
                it % config.checkpoint_every == 0
                or it == config.max_iterations - 1):
            full = _full_loss(unpack_trainable(vec, dims, config.delta),
                              dataset, config, gamma_eff)
        history.append(HistoryRecord(
            iteration=it, batch_loss=batch_loss + reg_value, full_loss=full,
            gamma_violation=violated, degenerate_count=degenerate,
            elapsed_seconds=time.perf_counter() - start))

    return unpack_trainable(vec, dims, config.delta), history


def _inner_pd(theta, epsilon, gamma):
    from .loss import inner_qp_matrix

    Q = inner_qp_matrix(theta, epsilon, gamma)
    if Q.shape[0] == 0:
        return True
    try:
        np.linalg.cholesky(Q)
        return True
    except np.linalg.LinAlgError:
        return False
