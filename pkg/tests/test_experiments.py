import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uotm import experiments as ex
from uotm.model import ArchSpec
from uotm.trainer import TrainConfig, initial_models


def test_outlier_mass_below_zero():
    pts = ex.sample_toy(ex.ToyDatasetSpec("OUTLIER_1D", 4000, seed=0)).points
    p = ex.mixture_cdf("OUTLIER_1D", 0.0)
    assert p == pytest.approx(0.01 * 0.977 + 0.99 * 0.0228, abs=2e-4)
    frac = np.mean(pts < 0)
    assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / 4000)


def test_matching_source_is_centered():
    pts = ex.sample_toy(ex.ToyDatasetSpec("MATCH_SOURCE_1D", 4000, seed=1)).points
    assert abs(pts.mean()) < 0.05


def test_sampling_is_deterministic():
    spec = ex.ToyDatasetSpec("MATCH_TARGET_1D", 100, seed=4)
    assert np.array_equal(ex.sample_toy(spec).points, ex.sample_toy(spec).points)
    other = ex.ToyDatasetSpec("MATCH_TARGET_1D", 100, seed=5)
    assert not np.array_equal(ex.sample_toy(spec).points, ex.sample_toy(other).points)


def test_unknown_dataset():
    with pytest.raises(ValueError):
        ex.ToyDatasetSpec("SPIRAL", 10)
    with pytest.raises(ValueError):
        ex.ToyDatasetSpec("OUTLIER_1D", 0)


def test_std_normal_dim():
    s = ex.sample_toy(ex.ToyDatasetSpec("STD_NORMAL", 50, seed=0, dim=3))
    assert s.points.shape == (50, 3) and len(s) == 50


@pytest.mark.parametrize("name", ["OUTLIER_1D", "MATCH_SOURCE_1D", "MATCH_TARGET_1D"])
def test_moments_match_mixture(name):
    pts = ex.sample_toy(ex.ToyDatasetSpec(name, 4000, seed=2)).points[:, 0]
    mean, var = ex.mixture_stats(name)
    assert abs(pts.mean() - mean) < 3 * math.sqrt(var / 4000)
    # standard error of the sample variance uses the fourth central moment
    m4 = np.mean((pts - pts.mean()) ** 4)
    assert abs(pts.var() - var) < 3 * math.sqrt((m4 - var ** 2) / 4000)


def test_mixture_stats_hand_values():
    mean, var = ex.mixture_stats("MATCH_TARGET_1D")
    assert mean == pytest.approx(1.0)
    assert var == pytest.approx(0.25 + (1 / 3) * 4 + (2 / 3) * 1)


# ---------------------------------------------------------------- kNN KL


def test_knn_same_distribution_near_zero():
    vals = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        vals.append(ex.knn_kl_estimate(rng.normal(size=(4000, 1)), rng.normal(size=(4000, 1))))
    assert abs(np.mean(vals)) < 0.05


def test_knn_unit_shift_gaussian():
    vals = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        vals.append(ex.knn_kl_estimate(rng.normal(size=(4000, 1)), rng.normal(1.0, 1.0, size=(4000, 1))))
    assert abs(np.mean(vals) - 0.5) < 0.1


def test_knn_hand_instance():
    p = np.array([0.0, 1.0, 3.0])
    q = np.array([0.5, 2.0, 4.0])
    k = 2
    # k-th neighbour distances worked out by hand
    r = [3.0, 2.0, 3.0]        # within p, excluding self
    s = [2.0, 1.0, 1.0]        # in q
    expected = (1 / 3) * sum(math.log(si / ri) for si, ri in zip(s, r)) + math.log(3 / 2)
    assert ex.knn_kl_estimate(p, q, k) == pytest.approx(expected, abs=1e-10)


def test_knn_errors():
    with pytest.raises(ValueError):
        ex.knn_kl_estimate(np.zeros(10), np.arange(10.0))
    with pytest.raises(ValueError):
        ex.knn_kl_estimate(np.arange(2.0), np.arange(10.0))
    with pytest.raises(ValueError):
        ex.knn_kl_estimate(np.zeros((5, 1)), np.zeros((5, 2)))


def test_knn_chunking_is_invariant():
    rng = np.random.default_rng(3)
    p, q = rng.normal(size=(1500, 2)), rng.normal(size=(900, 2))
    a = ex._kth_distances(p, q, 2, False, chunk=7)
    b = ex._kth_distances(p, q, 2, False, chunk=4096)
    np.testing.assert_array_equal(a, b)


def test_knn_ties_are_finite():
    p = np.array([0.0, 0.0, 0.0, 1.0, 2.0])
    q = np.array([0.0, 0.0, 0.0, 1.0])
    assert np.isfinite(ex.knn_kl_estimate(p, q))


# ---------------------------------------------------------------- monotonicity and mode mass


def test_monotonicity_identity():
    x = np.linspace(0, 1, 10)
    assert ex.monotonicity_score(x, x) == 1.0


def test_monotonicity_decreasing():
    x = np.linspace(0, 1, 10)
    assert ex.monotonicity_score(x, -x) == 0.0


def test_monotonicity_hand_instance():
    assert ex.monotonicity_score([(0, 0), (1, 2), (2, 1)]) == 0.5


def test_monotonicity_duplicates_are_averaged():
    assert ex.monotonicity_score([0, 0, 1], [0, 2, 1.5]) == 1.0
    with pytest.raises(ValueError):
        ex.monotonicity_score([1, 1], [0, 1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=30, unique=True),
       st.lists(st.floats(-5, 5), min_size=30, max_size=30))
def test_monotonicity_reparametrization_invariance(xs, ts):
    # integer grid keeps the strictly increasing map injective in floating point
    x = np.array(xs, dtype=float)
    t = np.array(ts[:len(xs)])
    assert ex.monotonicity_score(x, t) == ex.monotonicity_score(np.exp(x / 100) + 3 * x, t)


def test_mode_mass_examples():
    assert ex.mode_mass([1.0, 2.0, 3.0], 0.0, "below") == 0.0
    assert ex.mode_mass([-1.0, 1.0], 0.0, "below") == 0.5
    assert ex.mode_mass([-1.0, 1.0], 0.0, "above") == 0.5
    with pytest.raises(ValueError):
        ex.mode_mass([], 0.0)
    with pytest.raises(ValueError):
        ex.mode_mass([1.0], 0.0, "left")


def test_mode_mass_on_outlier_data():
    pts = ex.sample_toy(ex.ToyDatasetSpec("OUTLIER_1D", 4000, seed=7)).points
    assert ex.mode_mass(pts, 0.0) == pytest.approx(ex.mixture_cdf("OUTLIER_1D", 0.0), abs=0.01)


# ---------------------------------------------------------------- CSV and evaluator


def test_samples_csv_round_trip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(20, 2))
    ex.save_samples_csv(tmp_path / "s.csv", pts)
    np.testing.assert_array_equal(ex.load_samples_csv(tmp_path / "s.csv"), pts)


def test_histogram_csv(tmp_path):
    rng = np.random.default_rng(0)
    ex.write_histogram_csv(tmp_path / "h.csv", {"a": rng.normal(size=200), "b": rng.normal(size=100)}, bins=10)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,density_a,density_b" and len(lines) == 11


def test_evaluator_metrics():
    src = ex.toy_sampler("MATCH_SOURCE_1D")
    ref = ex.sample_toy(ex.ToyDatasetSpec("MATCH_TARGET_1D", 500, seed=1)).points
    ev = ex.TransportEvaluator(src, ref, n=500)
    models = initial_models(TrainConfig(arch=ArchSpec(hidden=8, blocks=1)))
    out = ev(models)
    assert set(out) == {"kl", "monotonicity", "outlier_mass"}
    assert 0 <= out["monotonicity"] <= 1 and 0 <= out["outlier_mass"] <= 1
    assert ev.transport_map(models).shape == (256, 2)
    assert np.array_equal(ev.samples(models), ev.samples(models))
