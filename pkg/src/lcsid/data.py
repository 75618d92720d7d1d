"""Dataset generation, noise injection, CSV serialization, mode counting.

Randomness comes from numpy's default PCG64 generator seeded explicitly, so
identical seeds give identical datasets on every platform.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .lcp import solve_lcp_batch
from .model import Dims

NOISE_TARGETS = ("all", "next_state_only")


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray


@dataclass(frozen=True)
class SamplingRanges:
    x_low: float = -10.0
    x_high: float = 10.0
    u_low: float = -5.0
    u_high: float = 5.0

    def __post_init__(self):
        if not (self.x_low < self.x_high and self.u_low < self.u_high):
            raise ValueError("sampling ranges must satisfy low < high")


@dataclass(frozen=True)
class Dataset:
    """Transitions stored as row-major arrays (one transition per row)."""

    dims: Dims
    xs: np.ndarray
    us: np.ndarray
    x_nexts: np.ndarray
    noise_sigma: float = 0.0
    seed: int = 0
    ground_truth_ref: str | None = None

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        us = np.asarray(self.us, dtype=float).reshape(xs.shape[0], self.dims.n_u)
        xn = np.asarray(self.x_nexts, dtype=float)
        if xs.shape[0] < 1:
            raise ValueError("dataset must contain at least one transition")
        if xs.shape != (xs.shape[0], self.dims.n_x) or xn.shape != xs.shape:
            raise ValueError("transition arrays inconsistent with dims")
        if not (np.isfinite(xs).all() and np.isfinite(us).all()
                and np.isfinite(xn).all()):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "us", us)
        object.__setattr__(self, "x_nexts", xn)

    def __len__(self):
        return self.xs.shape[0]

    @property
    def transitions(self):
        return [Transition(self.xs[i], self.us[i], self.x_nexts[i])
                for i in range(len(self))]

    def subset(self, indices):
        return Dataset(
            dims=self.dims,
            xs=self.xs[indices],
            us=self.us[indices],
            x_nexts=self.x_nexts[indices],
            noise_sigma=self.noise_sigma,
            seed=self.seed,
            ground_truth_ref=self.ground_truth_ref,
        )


def simulate_batch(theta, xs, us, gamma=None):
    """Vectorized forward step over rows of xs/us; returns (x_nexts, Lam)."""
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    q = theta.D @ xs.T + theta.E @ us.T + theta.c[:, None]
    lam, _ = solve_lcp_batch(theta.F, q, gamma=gamma)
    x_next = theta.A @ xs.T + theta.B @ us.T + theta.C @ lam + theta.d[:, None]
    return x_next.T, lam


def sample_dataset(theta_true, n, ranges=None, noise_sigma=0.0, seed=0,
                   noise_target="all", ground_truth_ref=None):
    """Draw n i.i.d. transitions from theta_true, then corrupt the record.

    x, u are uniform over the ranges; x_next is the exact simulation of the
    clean (x, u).  Gaussian noise with std noise_sigma is then added to the
    stored triple: all three fields under noise_target='all', only x_next
    under 'next_state_only'.
    """
    if n < 1:
        raise ValueError("need at least one transition")
    if noise_target not in NOISE_TARGETS:
        raise ValueError(f"noise_target must be one of {NOISE_TARGETS}")
    ranges = ranges or SamplingRanges()
    dims = theta_true.dims
    rng = np.random.default_rng(seed)
    xs = rng.uniform(ranges.x_low, ranges.x_high, (n, dims.n_x))
    us = rng.uniform(ranges.u_low, ranges.u_high, (n, dims.n_u))
    x_nexts, _ = simulate_batch(theta_true, xs, us)
    if noise_sigma > 0:
        if noise_target == "all":
            xs = xs + rng.normal(0.0, noise_sigma, xs.shape)
            us = us + rng.normal(0.0, noise_sigma, us.shape)
        x_nexts = x_nexts + rng.normal(0.0, noise_sigma, x_nexts.shape)
    return Dataset(dims=dims, xs=xs, us=us, x_nexts=x_nexts,
                   noise_sigma=noise_sigma, seed=seed,
                   ground_truth_ref=ground_truth_ref)


def count_modes(theta, dataset):
    """Number of distinct LCP active-set signatures over the dataset."""
    n_l = theta.dims.n_lambda
    if n_l == 0:
        return 1
    q = theta.D @ dataset.xs.T + theta.E @ dataset.us.T + theta.c[:, None]
    lam, phi = solve_lcp_batch(theta.F, q)
    bits = (lam > phi).T  # (N, n_lambda)
    modes = bits @ (1 << np.arange(n_l, dtype=np.int64))
    return int(np.unique(modes).size)


# --- CSV serialization -------------------------------------------------------

def _fmt(v):
    return format(float(v), ".17g")


def _meta_path(path):
    return str(path) + ".meta"


def write_dataset(dataset, path):
    """CSV with header x0..,u0..,xn0.. plus a key=value metadata sidecar."""
    dims = dataset.dims
    header = (
        [f"x{i}" for i in range(dims.n_x)]
        + [f"u{i}" for i in range(dims.n_u)]
        + [f"xn{i}" for i in range(dims.n_x)]
    )
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(dataset)):
            row = np.concatenate([dataset.xs[i], dataset.us[i],
                                  dataset.x_nexts[i]])
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    with open(_meta_path(path), "w") as fh:
        fh.write(f"n_x={dims.n_x}\n")
        fh.write(f"n_u={dims.n_u}\n")
        fh.write(f"n_lambda={dims.n_lambda}\n")
        fh.write(f"seed={dataset.seed}\n")
        fh.write(f"noise_sigma={_fmt(dataset.noise_sigma)}\n")
        if dataset.ground_truth_ref is not None:
            fh.write(f"ground_truth={dataset.ground_truth_ref}\n")


def _parse_header(header):
    names = header.strip().split(",")
    n_x = sum(1 for n in names if n.startswith("x") and not n.startswith("xn"))
    n_u = sum(1 for n in names if n.startswith("u"))
    n_xn = sum(1 for n in names if n.startswith("xn"))
    expected = (
        [f"x{i}" for i in range(n_x)]
        + [f"u{i}" for i in range(n_u)]
        + [f"xn{i}" for i in range(n_xn)]
    )
    if n_x != n_xn or names != expected:
        raise FormatError(f"malformed dataset header: {header.strip()!r}")
    return n_x, n_u


def read_dataset(path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"empty dataset file: {path}")
    n_x, n_u = _parse_header(lines[0])
    if len(lines) < 2:
        raise FormatError(f"dataset file has no transitions: {path}")
    try:
        rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError:
        raise FormatError(f"non-numeric entry in {path}") from None
    if rows.shape[1] != 2 * n_x + n_u:
        raise FormatError(f"row width disagrees with header in {path}")
    meta = {"n_lambda": 0, "seed": 0, "noise_sigma": 0.0, "ground_truth": None}
    try:
        with open(_meta_path(path)) as fh:
            for ln in fh:
                if "=" not in ln:
                    continue
                key, value = ln.strip().split("=", 1)
                meta[key] = value
    except FileNotFoundError:
        pass
    dims = Dims(n_x, n_u, int(meta["n_lambda"]))
    if int(meta.get("n_x", n_x)) != n_x or int(meta.get("n_u", n_u)) != n_u:
        raise FormatError(f"metadata dims disagree with header for {path}")
    return Dataset(
        dims=dims,
        xs=rows[:, :n_x],
        us=rows[:, n_x:n_x + n_u],
        x_nexts=rows[:, n_x + n_u:],
        noise_sigma=float(meta["noise_sigma"]),
        seed=int(meta["seed"]),
        ground_truth_ref=meta["ground_truth"],
    )
