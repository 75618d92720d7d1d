"""Test-set metric and randomized experiment grids.

The experiment runner sweeps one knob (n_lambda, n_x, stiffness, gamma or
epsilon) over several independent rounds, trains the selected methods on
fresh random systems, and writes a per-round summary CSV, a median/IQR
aggregate CSV, and a matplotlib figure next to them.
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import count_modes, sample_dataset, simulate_batch
from .errors import LcsidError, SolverError
from .model import Dims, StiffnessSpec, random_lcs
from .train import TrainConfig, train

SWEEP_NAMES = ("n_lambda", "n_x", "stiffness", "gamma", "epsilon")

SUMMARY_COLUMNS = (
    "sweep_name", "sweep_value", "round", "seed", "method", "e_test",
    "mode_count", "train_seconds", "degenerate_fraction", "gamma_violations",
)


@dataclass(frozen=True)
class EvalReport:
    e_test: float
    n_test: int
    per_sample_sq_errors: np.ndarray
    true_sq_norms: np.ndarray
    degenerate_fraction: float
    mode_count: int | None = None
    excluded: int = 0


def evaluate(theta, testset, mode_count_of=None):
    """Mean relative prediction error on a (noiseless) test set.

    e_test = sum ||x_pred - x_true||^2 / sum ||x_true||^2 over one-step
    predictions.  Points where the LCP solve fails are excluded and counted;
    degenerate (non-strict) solutions are still evaluated.
    """
    if len(testset) < 1:
        raise ValueError("test set must be non-empty")
    try:
        preds, lam = simulate_batch(theta, testset.xs, testset.us)
        excluded_idx = np.zeros(len(testset), dtype=bool)
    except (SolverError, np.linalg.LinAlgError):
        # batch path failed: fall back per sample and exclude the failures
        from .model import simulate_step

        preds = np.zeros_like(testset.x_nexts)
        lam = np.zeros((theta.dims.n_lambda, len(testset)))
        excluded_idx = np.zeros(len(testset), dtype=bool)
        for i in range(len(testset)):
            try:
                preds[i], sol = simulate_step(theta, testset.xs[i],
                                              testset.us[i])
                lam[:, i] = sol.lam
            except (SolverError, np.linalg.LinAlgError):
                excluded_idx[i] = True
        if excluded_idx.all():
            raise SolverError("every test point failed to solve") from None
    keep = ~excluded_idx
    err = preds[keep] - testset.x_nexts[keep]
    sq_errors = np.einsum("ij,ij->i", err, err)
    true_norms = np.einsum("ij,ij->i", testset.x_nexts[keep],
                           testset.x_nexts[keep])
    if theta.dims.n_lambda:
        q = (theta.D @ testset.xs[keep].T + theta.E @ testset.us[keep].T
             + theta.c[:, None])
        phi = theta.F @ lam[:, keep] + q
        strict = np.min(np.maximum(lam[:, keep], phi), axis=0) > 1e-6
        degenerate_fraction = float(1.0 - np.mean(strict))
    else:
        degenerate_fraction = 0.0
    mode_count = None
    if mode_count_of is not None:
        mode_count = count_modes(theta, mode_count_of)
    return EvalReport(
        e_test=float(np.sum(sq_errors) / np.sum(true_norms)),
        n_test=int(keep.sum()),
        per_sample_sq_errors=sq_errors,
        true_sq_norms=true_norms,
        degenerate_fraction=degenerate_fraction,
        mode_count=mode_count,
        excluded=int(excluded_idx.sum()),
    )


def write_eval_report(report, path):
    with open(path, "w") as fh:
        fh.write("index,sq_error,true_sq_norm\n")
        for i, (e, t) in enumerate(zip(report.per_sample_sq_errors,
                                       report.true_sq_norms)):
            fh.write(f"{i},{format(e, '.17g')},{format(t, '.17g')}\n")


@dataclass(frozen=True)
class ExperimentGrid:
    sweep_name: str
    sweep_values: tuple
    rounds: int
    dims: Dims
    stiffness: StiffnessSpec = StiffnessSpec(1.0)
    n_train: int = 5000
    n_test: int = 1000
    noise_sigma: float = 1e-2
    train_config: TrainConfig = field(default_factory=TrainConfig)
    methods: tuple = ("violation", "prediction")
    base_seed: int = 0
    count_dataset_modes: bool = True

    def __post_init__(self):
        if self.sweep_name not in SWEEP_NAMES:
            raise ValueError(f"sweep must be one of {SWEEP_NAMES}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.sweep_values:
            raise ValueError("sweep_values must be non-empty")
        if self.sweep_name in ("stiffness", "gamma", "epsilon"):
            if any(v <= 0 for v in self.sweep_values):
                raise ValueError(f"{self.sweep_name} values must be positive")
        for m in self.methods:
            if m not in ("violation", "prediction"):
                raise ValueError(f"unknown method {m!r}")


def _apply_sweep(grid, value):
    dims, stiffness, config = grid.dims, grid.stiffness, grid.train_config
    if grid.sweep_name == "n_lambda":
        dims = Dims(dims.n_x, dims.n_u, int(value))
    elif grid.sweep_name == "n_x":
        dims = Dims(int(value), dims.n_u, dims.n_lambda)
    elif grid.sweep_name == "stiffness":
        stiffness = StiffnessSpec(float(value))
    elif grid.sweep_name == "gamma":
        config = replace(config, gamma=float(value))
    elif grid.sweep_name == "epsilon":
        config = replace(config, epsilon=float(value))
    return dims, stiffness, config


def _round_seed(grid, value_index, round_index):
    return grid.base_seed + 104_729 * value_index + 7_919 * round_index


def _run_round(grid, value_index, round_index):
    """One (sweep value, round): returns (rows, failures)."""
    value = grid.sweep_values[value_index]
    dims, stiffness, base_config = _apply_sweep(grid, value)
    seed = _round_seed(grid, value_index, round_index)
    rows, failures = [], []
    try:
        truth = random_lcs(dims, stiffness, seed)
        trainset = sample_dataset(truth, grid.n_train,
                                  noise_sigma=grid.noise_sigma, seed=seed + 1)
        testset = sample_dataset(truth, grid.n_test, noise_sigma=0.0,
                                 seed=seed + 2)
        mode_count = (count_modes(truth, trainset)
                      if grid.count_dataset_modes else -1)
    except (LcsidError, np.linalg.LinAlgError, ValueError) as exc:
        return [], [(value, round_index, "setup", repr(exc))]
    for method in grid.methods:
        config = replace(base_config, method=method, init_seed=seed + 3,
                         shuffle_seed=seed + 4)
        t0 = time.perf_counter()
        try:
            learned, history = train(trainset, config)
            report = evaluate(learned, testset)
        except (LcsidError, np.linalg.LinAlgError) as exc:
            failures.append((value, round_index, method, repr(exc)))
            continue
        elapsed = time.perf_counter() - t0
        violations = sum(r.gamma_violation for r in history.records)
        rows.append({
            "sweep_name": grid.sweep_name,
            "sweep_value": value,
            "round": round_index,
            "seed": seed,
            "method": method,
            "e_test": report.e_test,
            "mode_count": mode_count,
            "train_seconds": elapsed,
            "degenerate_fraction": report.degenerate_fraction,
            "gamma_violations": violations,
        })
    return rows, failures


def _round_task(args):
    grid, vi, ri = args
    return _run_round(grid, vi, ri)


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def aggregate_rows(rows):
    """Median and quartiles of e_test per (sweep value, method)."""
    out = []
    keys = sorted({(r["sweep_value"], r["method"]) for r in rows},
                  key=lambda k: (k[0], k[1]))
    for value, method in keys:
        errs = np.array([r["e_test"] for r in rows
                         if r["sweep_value"] == value
                         and r["method"] == method])
        out.append({
            "sweep_value": value,
            "method": method,
            "rounds": errs.size,
            "e_test_median": float(np.median(errs)),
            "e_test_q1": float(np.quantile(errs, 0.25)),
            "e_test_q3": float(np.quantile(errs, 0.75)),
        })
    return out


def render_summary_figure(sweep_name, aggregates, path):
    """Median e_test with IQR band per method, rendered to an image file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for method in sorted({a["method"] for a in aggregates}):
        pts = sorted((a for a in aggregates if a["method"] == method),
                     key=lambda a: a["sweep_value"])
        xs = [a["sweep_value"] for a in pts]
        med = [a["e_test_median"] for a in pts]
        q1 = [a["e_test_q1"] for a in pts]
        q3 = [a["e_test_q3"] for a in pts]
        ax.plot(xs, med, marker="o", label=method)
        ax.fill_between(xs, q1, q3, alpha=0.2)
    ax.set_xlabel(sweep_name)
    ax.set_ylabel("e_test")
    ax.set_yscale("log")
    if sweep_name in ("gamma", "epsilon", "stiffness"):
        ax.set_xscale("log")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def run_experiment(grid, output_dir, jobs=1, fixed_timing=False):
    """Run the full grid; returns the summary CSV path."""
    os.makedirs(output_dir, exist_ok=True)
    tasks = [(grid, vi, ri)
             for vi in range(len(grid.sweep_values))
             for ri in range(grid.rounds)]
    rows, failures = [], []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_round_task, tasks))
    else:
        results = [_round_task(t) for t in tasks]
    for rws, fls in results:
        rows.extend(rws)
        failures.extend(fls)

    summary_path = os.path.join(output_dir, "summary.csv")
    with open(summary_path, "w") as fh:
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        for r in rows:
            values = [r[c] for c in SUMMARY_COLUMNS]
            if fixed_timing:
                values[SUMMARY_COLUMNS.index("train_seconds")] = 0.0
            fh.write(",".join(_fmt(v) for v in values) + "\n")

    aggregates = aggregate_rows(rows)
    agg_path = os.path.join(output_dir, "aggregate.csv")
    with open(agg_path, "w") as fh:
        fh.write("sweep_value,method,rounds,e_test_median,e_test_q1,"
                 "e_test_q3\n")
        for a in aggregates:
            fh.write(",".join(_fmt(a[k]) for k in (
                "sweep_value", "method", "rounds", "e_test_median",
                "e_test_q1", "e_test_q3")) + "\n")

    if aggregates:
        render_summary_figure(grid.sweep_name, aggregates,
                              os.path.join(output_dir, "e_test.png"))
    if failures:
        with open(os.path.join(output_dir, "failures.log"), "w") as fh:
            for value, rnd, stage, msg in failures:
                fh.write(f"{value},{rnd},{stage},{msg}\n")
    return summary_path
