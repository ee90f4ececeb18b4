"""Toy datasets and the evaluation metrics used on them."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# component weights, means and standard deviations of the 1D mixtures
MIXTURES = {
    "OUTLIER_1D": ((0.99, 0.01), (1.0, -1.0), (0.5, 0.5)),
    "MATCH_SOURCE_1D": ((0.5, 0.5), (-1.0, 1.0), (0.5, 0.5)),
    "MATCH_TARGET_1D": ((1.0 / 3.0, 2.0 / 3.0), (-1.0, 2.0), (0.5, 0.5)),
    # in-distribution part of OUTLIER_1D
    "OUTLIER_CLEAN_1D": ((1.0,), (1.0,), (0.5,)),
}


class ToyName(str, enum.Enum):
    OUTLIER_1D = "OUTLIER_1D"
    MATCH_SOURCE_1D = "MATCH_SOURCE_1D"
    MATCH_TARGET_1D = "MATCH_TARGET_1D"
    OUTLIER_CLEAN_1D = "OUTLIER_CLEAN_1D"
    STD_NORMAL = "STD_NORMAL"


@dataclass(frozen=True)
class ToyDatasetSpec:
    name: str
    n: int = 4000
    seed: int = 0
    dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "name", ToyName(str(self.name).upper()).value)
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.dim < 1:
            raise ValueError("dim must be at least 1")


@dataclass(frozen=True)
class SampleSet:
    points: np.ndarray
    provenance: ToyDatasetSpec

    def __len__(self):
        return self.points.shape[0]


def toy_sampler(name: str, dim: int = 1):
    """Return ``sample(rng, n) -> (n, d)`` for a named toy distribution."""
    name = ToyName(str(name).upper()).value
    if name == "STD_NORMAL":
        return lambda rng, n: rng.standard_normal((n, dim))
    weights, means, stds = MIXTURES[name]
    weights = np.asarray(weights)
    means = np.asarray(means)
    stds = np.asarray(stds)

    def sample(rng, n):
        comp = rng.choice(len(weights), size=n, p=weights)
        return (means[comp] + stds[comp] * rng.standard_normal(n))[:, None]

    return sample


def sample_toy(spec: ToyDatasetSpec) -> SampleSet:
    rng = np.random.default_rng(spec.seed)
    pts = toy_sampler(spec.name, spec.dim)(rng, spec.n)
    return SampleSet(np.asarray(pts, dtype=float), spec)


def mixture_stats(name: str) -> tuple[float, float]:
    """Analytic mean and variance of a 1D toy mixture."""
    weights, means, stds = (np.asarray(a) for a in MIXTURES[ToyName(name).value])
    mean = float(np.sum(weights * means))
    second = float(np.sum(weights * (stds ** 2 + means ** 2)))
    return mean, second - mean ** 2


def mixture_cdf(name: str, x: float) -> float:
    weights, means, stds = MIXTURES[ToyName(name).value]
    return float(sum(w * 0.5 * (1.0 + math.erf((x - m) / (s * math.sqrt(2.0))))
                     for w, m, s in zip(weights, means, stds)))


# ---------------------------------------------------------------- metrics

_TIE_EPS = 1e-12


def _kth_distances(a, b, k, exclude_self, chunk=512):
    out = np.empty(a.shape[0])
    kk = k if exclude_self else k - 1
    for s in range(0, a.shape[0], chunk):
        block = a[s:s + chunk]
        d2 = np.sum((block[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        # with exclude_self the zero self-distance occupies index 0
        out[s:s + chunk] = np.sqrt(np.partition(d2, kk, axis=1)[:, kk])
    return out


def knn_kl_estimate(p, q, k: int = 2) -> float:
    """k-nearest-neighbour estimate of KL(P | Q) from samples.

    ``(d/n) * sum_i log(s_k(x_i) / r_k(x_i)) + log(m / (n - 1))`` where
    ``r_k`` is the distance from ``x_i`` to its k-th neighbour among the other
    P samples and ``s_k`` its k-th neighbour among the Q samples.
    Neighbour search is brute force.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    if q.ndim == 1:
        q = q[:, None]
    if p.shape[1] != q.shape[1]:
        raise ValueError("samples differ in dimension")
    n, d = p.shape
    m = q.shape[0]
    if n <= k or m <= k:
        raise ValueError(f"need more than k={k} samples in each set")
    if np.all(p == p[0]) or np.all(q == q[0]):
        raise ValueError("degenerate sample: all points identical")
    r = _kth_distances(p, p, k, exclude_self=True)
    s = _kth_distances(p, q, k, exclude_self=False)
    return float(d / n * np.sum(np.log((s + _TIE_EPS) / (r + _TIE_EPS))) + math.log(m / (n - 1)))


def monotonicity_score(x, tx=None) -> float:
    """Fraction of adjacent (sorted by x) pairs where T does not decrease.

    Accepts either a list of ``(x, Tx)`` pairs or two arrays.  Duplicate x
    values are merged by averaging their Tx.
    """
    if tx is None:
        arr = np.asarray(x, dtype=float)
        xs, ts = arr[:, 0], arr[:, 1]
    else:
        xs = np.asarray(x, dtype=float).ravel()
        ts = np.asarray(tx, dtype=float).ravel()
    uniq, inv = np.unique(xs, return_inverse=True)
    if uniq.size < 2:
        raise ValueError("need at least two distinct x values")
    t_mean = np.bincount(inv, weights=ts) / np.bincount(inv)
    return float(np.mean(np.diff(t_mean) >= 0))


def mode_mass(samples, threshold: float = 0.0, side: str = "below") -> float:
    """Fraction of samples strictly below (or above) ``threshold``."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("no samples")
    if side == "below":
        return float(np.mean(s < threshold))
    if side == "above":
        return float(np.mean(s > threshold))
    raise ValueError("side must be 'below' or 'above'")


# ---------------------------------------------------------------- CSV I/O


def save_samples_csv(path, points, header=None) -> None:
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    header = header or [f"x{i}" for i in range(points.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in points:
            w.writerow([repr(float(v)) for v in row])


def load_samples_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, -1)


def histogram_rows(samples, bins=60, range_=(-4.0, 5.0)):
    counts, edges = np.histogram(np.asarray(samples).ravel(), bins=bins, range=range_, density=True)
    return np.column_stack([edges[:-1], edges[1:], counts])


def write_histogram_csv(path, columns: dict, bins=60, range_=(-4.0, 5.0)) -> None:
    """Density histograms of several sample sets on shared bins."""
    names = list(columns)
    hists = [histogram_rows(columns[n], bins, range_) for n in names]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi"] + [f"density_{n}" for n in names])
        for i in range(bins):
            w.writerow([repr(float(hists[0][i, 0])), repr(float(hists[0][i, 1]))]
                       + [repr(float(h[i, 2])) for h in hists])


# ---------------------------------------------------------------- run evaluation


class TransportEvaluator:
    """Metrics of a generator on fixed evaluation draws.

    * ``kl``: kNN-KL of generated samples against ``reference``.
    * ``monotonicity``: score of ``x -> T(x, 0)`` on a grid spanning the
      central 98% of the source.
    * ``outlier_mass``: generated mass below ``threshold``.
    """

    def __init__(self, source, reference, n: int = 4000, seed: int = 12345,
                 k: int = 2, threshold: float = 0.0, grid_size: int = 256, z_dim: int = 1):
        rng = np.random.default_rng(seed)
        self.x = np.asarray(source(rng, n), dtype=float)
        self.z = rng.standard_normal((n, z_dim))
        self.reference = np.asarray(reference, dtype=float)
        lo, hi = np.quantile(self.x[:, 0], [0.01, 0.99])
        self.grid = np.linspace(lo, hi, grid_size)[:, None]
        self.grid_z = np.zeros((grid_size, z_dim))
        self.k = k
        self.threshold = threshold

    def samples(self, models) -> np.ndarray:
        from .trainer import transport
        return transport(models.generator, self.x, self.z)

    def transport_map(self, models) -> np.ndarray:
        from .trainer import transport
        t = transport(models.generator, self.grid, self.grid_z)
        return np.column_stack([self.grid[:, 0], t[:, 0]])

    def __call__(self, models, epoch=None) -> dict:
        gen = self.samples(models)
        if not np.all(np.isfinite(gen)):
            return {"kl": math.inf, "monotonicity": math.nan, "outlier_mass": math.nan}
        tmap = self.transport_map(models)
        try:
            kl = knn_kl_estimate(gen, self.reference, self.k)
        except ValueError:
            kl = math.inf
        return {
            "kl": kl,
            "monotonicity": monotonicity_score(tmap[:, 0], tmap[:, 1]),
            "outlier_mass": mode_mass(gen, self.threshold, "below"),
        }
