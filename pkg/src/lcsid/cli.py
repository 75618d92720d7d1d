"""Command-line surface: generate / train / eval / experiment.

Configuration can come from a flat key=value file with sections (INI style,
see configs/), overridable by flags.  All randomness flows from explicit
--seed flags.  Exit codes: 0 success, 1 validation error, 2 solver failure,
3 I/O error.
"""

import argparse
import configparser
import os
import sys

import numpy as np

from .data import (
    NOISE_TARGETS,
    count_modes,
    read_dataset,
    sample_dataset,
    write_dataset,
)
from .errors import FormatError, LcsidError
from .evaluate import ExperimentGrid, evaluate, run_experiment, write_eval_report
from .model import Dims, StiffnessSpec, load_params, random_lcs, save_params
from .train import (
    GAMMA_POLICIES,
    METHODS,
    TrainConfig,
    train,
    write_history,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_IO = 3

_DEFAULTS = TrainConfig()


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_VALIDATION)


def _read_config_section(path, section):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(path)
    if section not in parser:
        return {}
    return dict(parser[section])


def _apply_config_defaults(args, keys, section_values):
    """Fill argparse values that were left at None from the config file."""
    for key in keys:
        if getattr(args, key) is None and key in section_values:
            setattr(args, key, section_values[key])


def build_parser():
    parser = _Parser(prog="lcsid",
                     description="Identify linear complementarity systems "
                                 "from transition data.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser(
        "generate", help="draw a random ground-truth LCS and datasets",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    gen.add_argument("--nx", type=int, required=True, help="state dimension")
    gen.add_argument("--nu", type=int, default=0, help="input dimension")
    gen.add_argument("--nlambda", type=int, default=0,
                     help="complementarity dimension")
    gen.add_argument("--ntrain", type=int, required=True,
                     help="training transitions")
    gen.add_argument("--ntest", type=int, default=1000,
                     help="test transitions (noiseless)")
    gen.add_argument("--noise", type=float, default=1e-2,
                     help="training noise std")
    gen.add_argument("--noise-target", choices=NOISE_TARGETS, default="all",
                     help="which stored fields receive noise")
    gen.add_argument("--stiffness", type=float, default=1.0,
                     help="target min-eig(F+F^T) of the ground truth")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True, help="output directory")

    tr = sub.add_parser(
        "train", help="fit an LCS to a dataset",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    tr.add_argument("--dataset", required=True, help="training CSV path")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--config", default=None,
                    help="key=value config file ([train] section)")
    tr.add_argument("--method", choices=METHODS, default=None,
                    help=f"loss to minimize (default {_DEFAULTS.method})")
    tr.add_argument("--epsilon", type=float, default=None,
                    help=f"violation penalty weight (default {_DEFAULTS.epsilon})")
    tr.add_argument("--gamma", type=float, default=None,
                    help=f"proxy-QP gamma (default {_DEFAULTS.gamma})")
    tr.add_argument("--omega", type=float, default=None,
                    help=f"||C||_F^2 regularizer weight (default {_DEFAULTS.omega})")
    tr.add_argument("--learning-rate", type=float, default=None,
                    help=f"Adam learning rate (default {_DEFAULTS.learning_rate})")
    tr.add_argument("--beta1", type=float, default=None,
                    help=f"Adam beta1 (default {_DEFAULTS.beta1})")
    tr.add_argument("--beta2", type=float, default=None,
                    help=f"Adam beta2 (default {_DEFAULTS.beta2})")
    tr.add_argument("--adam-epsilon", type=float, default=None,
                    help=f"Adam epsilon (default {_DEFAULTS.adam_epsilon})")
    tr.add_argument("--batch-size", type=int, default=None,
                    help=f"minibatch size (default {_DEFAULTS.batch_size})")
    tr.add_argument("--iterations", type=int, default=None,
                    help=f"Adam steps (default {_DEFAULTS.max_iterations})")
    tr.add_argument("--init-seed", type=int, default=None,
                    help=f"parameter init seed (default {_DEFAULTS.init_seed})")
    tr.add_argument("--shuffle-seed", type=int, default=None,
                    help=f"minibatch shuffle seed (default {_DEFAULTS.shuffle_seed})")
    tr.add_argument("--gamma-policy", choices=GAMMA_POLICIES, default=None,
                    help=f"gamma handling (default {_DEFAULTS.gamma_policy})")
    tr.add_argument("--delta", type=float, default=None,
                    help=f"stiffness floor of F+F^T (default {_DEFAULTS.delta})")
    tr.add_argument("--nlambda", type=int, default=None,
                    help="override the dataset metadata n_lambda")
    tr.add_argument("--fixed-timing", action="store_true",
                    help="write 0 for elapsed-time columns (byte-"
                         "reproducible output)")
    tr.add_argument("--no-figure", action="store_true",
                    help="skip the loss-curve figure")

    ev = sub.add_parser(
        "eval", help="evaluate learned parameters on a test set",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ev.add_argument("--params", required=True, help="parameter file")
    ev.add_argument("--testset", required=True, help="test CSV path")
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--no-figure", action="store_true",
                    help="skip the error-histogram figure")

    ex = sub.add_parser(
        "experiment", help="run a sweep grid",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ex.add_argument("--grid", required=True, help="grid config file")
    ex.add_argument("--out", required=True, help="output directory")
    ex.add_argument("--jobs", type=int, default=1,
                    help="parallel rounds (1 = sequential, reproducible)")
    ex.add_argument("--fixed-timing", action="store_true",
                    help="write 0 for train_seconds (byte-reproducible)")
    return parser


# --- generate -----------------------------------------------------------------

def cmd_generate(args):
    dims = Dims(args.nx, args.nu, args.nlambda)
    stiffness = StiffnessSpec(args.stiffness)
    if args.ntrain < 1 or args.ntest < 1:
        raise ValueError("ntrain and ntest must be >= 1")
    if args.noise < 0:
        raise ValueError("noise must be non-negative")
    truth = random_lcs(dims, stiffness, args.seed)
    trainset = sample_dataset(truth, args.ntrain, noise_sigma=args.noise,
                              seed=args.seed + 1,
                              noise_target=args.noise_target,
                              ground_truth_ref="truth.lcs")
    testset = sample_dataset(truth, args.ntest, noise_sigma=0.0,
                             seed=args.seed + 2,
                             ground_truth_ref="truth.lcs")
    os.makedirs(args.out, exist_ok=True)
    save_params(truth, os.path.join(args.out, "truth.lcs"))
    write_dataset(trainset, os.path.join(args.out, "train.csv"))
    write_dataset(testset, os.path.join(args.out, "test.csv"))
    modes = count_modes(truth, trainset)
    print(f"wrote truth.lcs, train.csv, test.csv to {args.out}")
    print(f"training set covers {modes} distinct modes")
    return EXIT_OK


# --- train ---------------------------------------------------------------------

_TRAIN_KEYS = {
    "method": str, "epsilon": float, "gamma": float, "omega": float,
    "learning_rate": float, "beta1": float, "beta2": float,
    "adam_epsilon": float, "batch_size": int, "iterations": int,
    "init_seed": int, "shuffle_seed": int, "gamma_policy": str,
    "delta": float,
}


def _train_config_from_args(args):
    if args.config is not None:
        section = _read_config_section(args.config, "train")
        _apply_config_defaults(args, _TRAIN_KEYS.keys(), section)
    values = {}
    for key, cast in _TRAIN_KEYS.items():
        raw = getattr(args, key)
        if raw is not None:
            values[key] = cast(raw)
    if "iterations" in values:
        values["max_iterations"] = values.pop("iterations")
    return TrainConfig(**values)


def _render_loss_curve(history, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    its = [r.iteration for r in history.records]
    batch = [r.batch_loss for r in history.records]
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.plot(its, batch, lw=0.8, label="minibatch loss")
    cp = [(r.iteration, r.full_loss) for r in history.records
          if np.isfinite(r.full_loss)]
    if cp:
        ax.plot(*zip(*cp), marker="o", ms=3, lw=1.2, label="full-data loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def cmd_train(args):
    config = _train_config_from_args(args)
    dataset = read_dataset(args.dataset)
    if args.nlambda is not None:
        if args.nlambda < 0:
            raise ValueError("nlambda must be non-negative")
        from .data import Dataset

        dataset = Dataset(
            dims=Dims(dataset.dims.n_x, dataset.dims.n_u, args.nlambda),
            xs=dataset.xs, us=dataset.us, x_nexts=dataset.x_nexts,
            noise_sigma=dataset.noise_sigma, seed=dataset.seed,
            ground_truth_ref=dataset.ground_truth_ref)
    if dataset.dims.n_lambda == 0:
        print("warning: dataset metadata has n_lambda=0; "
              "pass --nlambda to train a complementarity model",
              file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    learned, history = train(dataset, config)
    save_params(learned, os.path.join(args.out, "learned.lcs"))
    write_history(history, os.path.join(args.out, "history.csv"),
                  fixed_timing=args.fixed_timing)
    if not args.no_figure:
        _render_loss_curve(history, os.path.join(args.out, "loss_curve.png"))
    finals = [r.full_loss for r in history.records
              if np.isfinite(r.full_loss)]
    if finals:
        print(f"final full-data loss: {finals[-1]:.6e}")
    print(f"wrote learned.lcs and history.csv to {args.out}")
    return EXIT_OK


# --- eval ----------------------------------------------------------------------

def _render_error_hist(report, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    errs = np.asarray(report.per_sample_sq_errors)
    positive = errs[errs > 0]
    if positive.size:
        bins = np.logspace(np.log10(positive.min()),
                           np.log10(positive.max()) + 1e-12, 40)
        ax.hist(positive, bins=bins)
        ax.set_xscale("log")
    else:
        ax.hist(errs, bins=40)
    ax.set_xlabel("per-sample squared error")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def cmd_eval(args):
    theta = load_params(args.params)
    testset = read_dataset(args.testset)
    report = evaluate(theta, testset)
    os.makedirs(args.out, exist_ok=True)
    write_eval_report(report, os.path.join(args.out, "eval_report.csv"))
    if not args.no_figure:
        _render_error_hist(report, os.path.join(args.out, "error_hist.png"))
    print(f"e_test = {report.e_test:.12e}  (n_test={report.n_test}, "
          f"degenerate_fraction={report.degenerate_fraction:.4f}, "
          f"excluded={report.excluded})")
    return EXIT_OK


# --- experiment ----------------------------------------------------------------

def load_grid(path):
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if "grid" not in parser or "dims" not in parser:
        raise FormatError(f"grid file needs [grid] and [dims] sections: {path}")
    g = parser["grid"]
    dims_section = parser["dims"]
    dims = Dims(dims_section.getint("n_x"), dims_section.getint("n_u", 0),
                dims_section.getint("n_lambda", 0))
    stiffness = StiffnessSpec(dims_section.getfloat("stiffness", 1.0))
    train_values = {}
    if "train" in parser:
        for key, cast in _TRAIN_KEYS.items():
            if key in parser["train"]:
                train_values[key] = cast(parser["train"][key])
    if "iterations" in train_values:
        train_values["max_iterations"] = train_values.pop("iterations")
    sweep = g.get("sweep")
    values = tuple(float(v) for v in g.get("values").replace(",", " ").split())
    if sweep in ("n_lambda", "n_x"):
        values = tuple(int(v) for v in values)
    methods = tuple(m.strip() for m in
                    g.get("methods", "violation,prediction").split(",")
                    if m.strip())
    return ExperimentGrid(
        sweep_name=sweep,
        sweep_values=values,
        rounds=g.getint("rounds", 1),
        dims=dims,
        stiffness=stiffness,
        n_train=g.getint("n_train", 5000),
        n_test=g.getint("n_test", 1000),
        noise_sigma=g.getfloat("noise_sigma", 1e-2),
        train_config=TrainConfig(**train_values),
        methods=methods,
        base_seed=g.getint("base_seed", 0),
        count_dataset_modes=g.getboolean("count_modes", True),
    )


def cmd_experiment(args):
    grid = load_grid(args.grid)
    if args.jobs < 1:
        raise ValueError("jobs must be >= 1")
    summary = run_experiment(grid, args.out, jobs=args.jobs,
                             fixed_timing=args.fixed_timing)
    print(f"wrote {summary}")
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except LcsidError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
