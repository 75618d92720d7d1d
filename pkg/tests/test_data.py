"""Dataset sampling, noise placement, CSV round trips, mode counting."""

import numpy as np
import pytest

from lcsid.data import (
    Dataset,
    SamplingRanges,
    count_modes,
    read_dataset,
    sample_dataset,
    simulate_batch,
    write_dataset,
)
from lcsid.errors import FormatError
from lcsid.model import Dims, StiffnessSpec, random_lcs, simulate_step


@pytest.fixture(scope="module")
def truth():
    return random_lcs(Dims(3, 2, 3), StiffnessSpec(1.0), seed=100)


def test_sample_shapes_and_ranges(truth):
    ds = sample_dataset(truth, 500, seed=1)
    assert len(ds) == 500
    assert ds.xs.shape == (500, 3)
    assert ds.us.shape == (500, 2)
    assert ds.x_nexts.shape == (500, 3)
    assert ds.xs.min() >= -10 and ds.xs.max() <= 10
    assert ds.us.min() >= -5 and ds.us.max() <= 5


def test_sample_deterministic(truth):
    a = sample_dataset(truth, 50, seed=7, noise_sigma=1e-2)
    b = sample_dataset(truth, 50, seed=7, noise_sigma=1e-2)
    assert np.array_equal(a.xs, b.xs)
    assert np.array_equal(a.x_nexts, b.x_nexts)


def test_noiseless_data_resimulates_exactly(truth):
    ds = sample_dataset(truth, 100, seed=3, noise_sigma=0.0)
    for i in range(0, 100, 13):
        x_next, _ = simulate_step(truth, ds.xs[i], ds.us[i])
        assert np.max(np.abs(x_next - ds.x_nexts[i])) < 1e-9


def test_simulate_batch_matches_single_steps(truth):
    ds = sample_dataset(truth, 40, seed=4)
    xn, lam = simulate_batch(truth, ds.xs, ds.us)
    for i in range(0, 40, 7):
        ref, sol = simulate_step(truth, ds.xs[i], ds.us[i])
        assert np.max(np.abs(xn[i] - ref)) < 1e-8
        assert np.max(np.abs(lam[:, i] - sol.lam)) < 1e-8


def test_noise_targets(truth):
    clean = sample_dataset(truth, 80, seed=9, noise_sigma=0.0)
    all_noisy = sample_dataset(truth, 80, seed=9, noise_sigma=1e-2,
                               noise_target="all")
    next_only = sample_dataset(truth, 80, seed=9, noise_sigma=1e-2,
                               noise_target="next_state_only")
    # 'all' perturbs every stored field; 'next_state_only' leaves x, u intact
    assert not np.array_equal(all_noisy.xs, clean.xs)
    assert not np.array_equal(all_noisy.us, clean.us)
    assert np.array_equal(next_only.xs, clean.xs)
    assert np.array_equal(next_only.us, clean.us)
    assert not np.array_equal(next_only.x_nexts, clean.x_nexts)
    # noise scale sanity
    assert np.std(all_noisy.x_nexts - clean.x_nexts) < 5e-2


def test_invalid_noise_target(truth):
    with pytest.raises(ValueError):
        sample_dataset(truth, 10, seed=0, noise_target="inputs")


def test_empty_dataset_rejected(truth):
    with pytest.raises(ValueError):
        sample_dataset(truth, 0, seed=0)


def test_subset(truth):
    ds = sample_dataset(truth, 30, seed=2)
    sub = ds.subset(np.array([3, 5, 7]))
    assert len(sub) == 3
    assert np.array_equal(sub.xs[1], ds.xs[5])


def test_csv_roundtrip_bit_exact(truth, tmp_path):
    ds = sample_dataset(truth, 25, seed=6, noise_sigma=1e-2,
                        ground_truth_ref="truth.lcs")
    p = tmp_path / "d.csv"
    write_dataset(ds, p)
    loaded = read_dataset(p)
    assert np.array_equal(loaded.xs, ds.xs)
    assert np.array_equal(loaded.us, ds.us)
    assert np.array_equal(loaded.x_nexts, ds.x_nexts)
    assert loaded.dims == ds.dims
    assert loaded.seed == ds.seed
    assert loaded.noise_sigma == ds.noise_sigma
    assert loaded.ground_truth_ref == "truth.lcs"
    # rewrite is byte-identical
    p2 = tmp_path / "d2.csv"
    write_dataset(loaded, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_read_rejects_malformed(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("")
    with pytest.raises(FormatError):
        read_dataset(p)
    p.write_text("x0,u0,xn0\n1.0,2.0,oops\n")
    with pytest.raises(FormatError):
        read_dataset(p)
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(FormatError):
        read_dataset(p)
    p.write_text("x0,u0,xn0\n")
    with pytest.raises(FormatError):
        read_dataset(p)


def test_read_without_sidecar_defaults(tmp_path, truth):
    ds = sample_dataset(truth, 5, seed=1)
    p = tmp_path / "d.csv"
    write_dataset(ds, p)
    (tmp_path / "d.csv.meta").unlink()
    loaded = read_dataset(p)
    assert loaded.dims.n_lambda == 0  # unknown without metadata


def test_count_modes_scalar_switch():
    # 1-d complementarity: lambda > 0 iff q = D x + c < 0, two modes
    theta = random_lcs(Dims(1, 0, 1), StiffnessSpec(1.0), seed=8)
    ds = sample_dataset(theta, 400, seed=3)
    assert count_modes(theta, ds) == 2


def test_count_modes_no_complementarity(truth):
    theta = random_lcs(Dims(2, 0, 0), StiffnessSpec(1.0), seed=0)
    ds = sample_dataset(theta, 10, seed=0)
    assert count_modes(theta, ds) == 1


def test_sampling_ranges_validation():
    with pytest.raises(ValueError):
        SamplingRanges(x_low=1.0, x_high=-1.0)


def test_dataset_rejects_nonfinite():
    with pytest.raises(ValueError):
        Dataset(dims=Dims(1, 0, 0), xs=np.array([[np.nan]]),
                us=np.zeros((1, 0)), x_nexts=np.array([[0.0]]))
