"""LCS parameter set, F reparameterization, simulation, random systems.

The dynamics are x_{t+1} = A x + B u + C lambda + d with lambda solving
lcp(F, D x + E u + c).  F is always carried through the factorization
F = G G^T + delta I + H - H^T, whose symmetric part G G^T + delta I is
positive semidefinite by construction (strictly definite for delta > 0).
"""

from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .lcp import min_eig_symmetric_part, solve_lcp

DEFAULT_DELTA = 1e-4


@dataclass(frozen=True)
class Dims:
    n_x: int
    n_u: int
    n_lambda: int

    def __post_init__(self):
        if self.n_x < 1:
            raise ValueError(f"n_x must be >= 1, got {self.n_x}")
        if self.n_u < 0 or self.n_lambda < 0:
            raise ValueError("n_u and n_lambda must be non-negative")


@dataclass(frozen=True)
class StiffnessSpec:
    """Target smallest eigenvalue of F + F^T for generated systems."""

    sigma_min_target: float = 1.0

    def __post_init__(self):
        if self.sigma_min_target <= 0:
            raise ValueError("sigma_min_target must be positive")


@dataclass(frozen=True)
class FParam:
    G: np.ndarray
    H: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        H = np.asarray(self.H, dtype=float)
        if G.shape != H.shape or G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError(
                f"G and H must be square and same-shaped, got {G.shape}, {H.shape}"
            )
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "H", H)

    @property
    def n(self):
        return self.G.shape[0]


def materialize_f(fparam):
    """F = G G^T + delta I + H - H^T."""
    G, H = fparam.G, fparam.H
    return G @ G.T + fparam.delta * np.eye(fparam.n) + H - H.T


def fparam_from_f(F, delta=0.0):
    """Factor a raw F (with PD symmetric part above delta) into an FParam.

    G is the Cholesky factor of the symmetric part minus delta I and
    H half the antisymmetric part, so materialize_f reproduces F exactly.
    """
    F = np.asarray(F, dtype=float)
    n = F.shape[0]
    sym = 0.5 * (F + F.T) - delta * np.eye(n)
    try:
        G = np.linalg.cholesky(sym) if n else np.zeros((0, 0))
    except np.linalg.LinAlgError:
        raise ValueError(
            "symmetric part of F minus delta*I is not positive definite"
        ) from None
    H = 0.25 * (F - F.T)
    return FParam(G=G, H=H, delta=delta)


@dataclass(frozen=True)
class LcsParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    d: np.ndarray
    D: np.ndarray
    E: np.ndarray
    fparam: FParam
    c: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("A", "B", "C", "D", "E"):
            arrays[name] = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
        for name in ("d", "c"):
            arrays[name] = np.asarray(getattr(self, name), dtype=float).reshape(-1)
        n_x = arrays["A"].shape[0]
        n_u = arrays["B"].shape[1] if arrays["B"].size else arrays["B"].shape[1]
        n_l = self.fparam.n
        expected = {
            "A": (n_x, n_x),
            "B": (n_x, n_u),
            "C": (n_x, n_l),
            "d": (n_x,),
            "D": (n_l, n_x),
            "E": (n_l, n_u),
            "c": (n_l,),
        }
        for name, arr in arrays.items():
            shape = expected[name]
            if arr.shape != shape:
                # allow empty blocks written with a compatible zero dimension
                if arr.size == 0 and 0 in shape:
                    arr = arr.reshape(shape)
                else:
                    raise ValueError(
                        f"{name} has shape {arr.shape}, expected {shape}"
                    )
            object.__setattr__(self, name, arr)

    @property
    def dims(self):
        return Dims(self.A.shape[0], self.B.shape[1], self.fparam.n)

    @property
    def F(self):
        # blocks are never mutated after construction, so materializing
        # G G^T + delta I + H - H^T once per instance is safe
        cached = self.__dict__.get("_F")
        if cached is None:
            cached = materialize_f(self.fparam)
            object.__setattr__(self, "_F", cached)
        return cached

    def min_eig_f_sym(self):
        cached = self.__dict__.get("_min_eig")
        if cached is None:
            cached = min_eig_symmetric_part(self.F)
            object.__setattr__(self, "_min_eig", cached)
        return cached


def simulate_step(theta, x, u, gamma=None):
    """One forward step; returns (x_next, LcpSolution)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    q = theta.D @ x + theta.E @ u + theta.c
    sol = solve_lcp(theta.F, q, gamma=gamma)
    x_next = theta.A @ x + theta.B @ u + theta.C @ sol.lam + theta.d
    return x_next, sol


def random_lcs(dims, stiffness, seed, delta=0.0):
    """Draw a ground-truth LCS with an exact stiffness floor.

    All blocks are i.i.d. uniform on [-1, 1]; the raw F's symmetric part has
    its spectrum shifted so min-eig(F + F^T) equals the target exactly, and
    the antisymmetric part is retained.  Deterministic per seed (numpy PCG64).
    """
    target = stiffness.sigma_min_target
    if delta < 0 or 2 * delta >= target:
        raise ValueError("need 0 <= 2*delta < sigma_min_target")
    rng = np.random.default_rng(seed)
    n_x, n_u, n_l = dims.n_x, dims.n_u, dims.n_lambda
    uni = lambda *shape: rng.uniform(-1.0, 1.0, shape)
    A = uni(n_x, n_x)
    B = uni(n_x, n_u)
    C = uni(n_x, n_l)
    d = uni(n_x)
    D = uni(n_l, n_x)
    E = uni(n_l, n_u)
    c = uni(n_l)
    F0 = uni(n_l, n_l)
    sym = 0.5 * (F0 + F0.T)
    if n_l:
        w_min = float(np.linalg.eigvalsh(sym)[0])
        sym = sym + (0.5 * target - w_min) * np.eye(n_l)
    F = sym + 0.5 * (F0 - F0.T)
    fparam = fparam_from_f(F, delta=delta)
    return LcsParams(A=A, B=B, C=C, d=d, D=D, E=E, fparam=fparam, c=c)


# --- flat text serialization -------------------------------------------------

_BLOCK_ORDER = ("A", "B", "C", "d", "D", "E", "G", "H", "c")


def _fmt(v):
    return format(float(v), ".17g")


def save_params(theta, path):
    """Write the flat text format: header + one matrix block per section."""
    dims = theta.dims
    blocks = {
        "A": theta.A, "B": theta.B, "C": theta.C,
        "d": theta.d.reshape(-1, 1),
        "D": theta.D, "E": theta.E,
        "G": theta.fparam.G, "H": theta.fparam.H,
        "c": theta.c.reshape(-1, 1),
    }
    lines = [f"lcs {dims.n_x} {dims.n_u} {dims.n_lambda} {_fmt(theta.fparam.delta)}"]
    for name in _BLOCK_ORDER:
        mat = np.atleast_2d(blocks[name])
        lines.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path):
    with open(path) as fh:
        tokens = fh.read().split()
    it = iter(tokens)
    try:
        tag = next(it)
        if tag != "lcs":
            raise FormatError(f"expected 'lcs' header, got {tag!r}")
        n_x, n_u, n_l = int(next(it)), int(next(it)), int(next(it))
        delta = float(next(it))
        blocks = {}
        for _ in _BLOCK_ORDER:
            name = next(it)
            rows, cols = int(next(it)), int(next(it))
            data = np.array([float(next(it)) for _ in range(rows * cols)])
            blocks[name] = data.reshape(rows, cols)
    except StopIteration:
        raise FormatError(f"truncated parameter file: {path}") from None
    missing = set(_BLOCK_ORDER) - set(blocks)
    if missing:
        raise FormatError(f"missing blocks {sorted(missing)} in {path}")
    fparam = FParam(G=blocks["G"], H=blocks["H"], delta=delta)
    theta = LcsParams(
        A=blocks["A"], B=blocks["B"].reshape(n_x, n_u),
        C=blocks["C"].reshape(n_x, n_l), d=blocks["d"].reshape(-1),
        D=blocks["D"].reshape(n_l, n_x), E=blocks["E"].reshape(n_l, n_u),
        fparam=fparam, c=blocks["c"].reshape(-1),
    )
    if theta.dims != Dims(n_x, n_u, n_l):
        raise FormatError(f"block shapes disagree with header in {path}")
    return theta
