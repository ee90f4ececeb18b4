"""Csiszar entropy functions, their convex conjugates, and discrete divergences.

Each :class:`EntropySpec` bundles an entropy ``psi``, its conjugate
``psi_star`` and the derivative ``psi_star_prime``.  The conjugates are the
functions the semi-dual losses are built from; ``psi_star_node`` applies
them to tape nodes so they can be differentiated.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


class EntropySpec(enum.Enum):
    IDENTITY = "identity"
    KL = "kl"
    CHI2 = "chi2"
    SOFTPLUS = "softplus"

    @classmethod
    def parse(cls, name) -> "EntropySpec":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        aliases = {"id": "identity", "ot": "identity", "chisq": "chi2", "x2": "chi2"}
        key = aliases.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown entropy {name!r}; expected one of "
                         f"{[m.value for m in cls]}")

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class DiscreteMeasure:
    """Atoms in R^d with nonnegative weights."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=float).ravel()
        if atoms.shape[0] != weights.shape[0]:
            raise ValueError("atoms and weights differ in length")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def __len__(self):
        return len(self.weights)

    @classmethod
    def uniform(cls, atoms) -> "DiscreteMeasure":
        atoms = np.asarray(atoms, dtype=float)
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))


# lim_{t->inf} psi(t)/t; every supported entropy is superlinear or has bounded domain
RECESSION = {
    EntropySpec.IDENTITY: np.inf,
    EntropySpec.KL: np.inf,
    EntropySpec.CHI2: np.inf,
    EntropySpec.SOFTPLUS: np.inf,
}


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else x


def psi_star(spec: EntropySpec, x):
    """Convex conjugate of the entropy, elementwise."""
    x_arr = np.asarray(x, dtype=float)
    if spec is EntropySpec.IDENTITY:
        r = x_arr.copy()
    elif spec is EntropySpec.KL:
        r = np.expm1(x_arr)
    elif spec is EntropySpec.CHI2:
        r = np.where(x_arr >= -2.0, 0.25 * x_arr ** 2 + x_arr, -1.0)
    elif spec is EntropySpec.SOFTPLUS:
        r = _softplus(x_arr)
    else:
        raise ValueError(spec)
    return _out(r, x)


def psi_star_prime(spec: EntropySpec, x):
    """Derivative of :func:`psi_star`; the per-sample reweighting factor."""
    x_arr = np.asarray(x, dtype=float)
    if spec is EntropySpec.IDENTITY:
        r = np.ones_like(x_arr)
    elif spec is EntropySpec.KL:
        r = np.exp(x_arr)
    elif spec is EntropySpec.CHI2:
        r = np.where(x_arr >= -2.0, 0.5 * x_arr + 1.0, 0.0)
    elif spec is EntropySpec.SOFTPLUS:
        r = _logistic(x_arr)
    else:
        raise ValueError(spec)
    return _out(r, x)


def psi(spec: EntropySpec, x):
    """Entropy function, with +inf outside its domain.

    SOFTPLUS is defined through its conjugate; its entropy is the binary
    (Fermi-Dirac) entropy ``x log x + (1-x) log(1-x)`` on [0, 1].
    """
    x_arr = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if spec is EntropySpec.IDENTITY:
            r = np.where(x_arr == 1.0, 0.0, np.inf)
        elif spec is EntropySpec.KL:
            safe = np.where(x_arr > 0, x_arr, 1.0)
            r = np.where(x_arr > 0, safe * np.log(safe) - safe + 1.0,
                         np.where(x_arr == 0, 1.0, np.inf))
        elif spec is EntropySpec.CHI2:
            r = np.where(x_arr >= 0, (x_arr - 1.0) ** 2, np.inf)
        elif spec is EntropySpec.SOFTPLUS:
            inside = (x_arr >= 0) & (x_arr <= 1)
            t = np.clip(x_arr, 0.0, 1.0)
            r = np.where(inside, _xlogx(t) + _xlogx(1.0 - t), np.inf)
        else:
            raise ValueError(spec)
    return _out(r, x)


def _xlogx(t):
    safe = np.where(t > 0, t, 1.0)
    return np.where(t > 0, safe * np.log(safe), 0.0)


def psi_star_node(spec: EntropySpec, x: dc.Node) -> dc.Node:
    """``psi_star`` on a tape node, built from elementary ops."""
    if spec is EntropySpec.IDENTITY:
        return x
    if spec is EntropySpec.KL:
        return dc.exp(x) - 1.0
    if spec is EntropySpec.CHI2:
        # max(x, -2) collapses both branches into one quadratic
        m = dc.relu(x + 2.0) - 2.0
        return dc.pow2(m) * 0.25 + m
    if spec is EntropySpec.SOFTPLUS:
        absx = dc.relu(x) + dc.relu(-x)
        return dc.relu(x) + dc.log(dc.exp(-absx) + 1.0)
    raise ValueError(spec)


def csiszar_divergence(spec: EntropySpec, rho: DiscreteMeasure, ref: DiscreteMeasure) -> float:
    """sum_i ref_i * psi(rho_i / ref_i), plus the singular part where ref_i = 0.

    Both measures must live on the same atoms.
    """
    if rho.atoms.shape != ref.atoms.shape or not np.array_equal(rho.atoms, ref.atoms):
        raise ValueError("csiszar_divergence needs aligned supports")
    return _divergence_weights(spec, rho.weights, ref.weights)


def _divergence_weights(spec, r, m) -> float:
    r = np.asarray(r, dtype=float)
    m = np.asarray(m, dtype=float)
    pos = m > 0
    total = 0.0
    if np.any(pos):
        vals = m[pos] * np.asarray(psi(spec, r[pos] / m[pos]))
        total = float(vals.sum())
    singular = (~pos) & (r > 0)
    if np.any(singular):
        total += float(r[singular].sum()) * RECESSION[spec]
    return total


def conjugate_bruteforce(spec: EntropySpec, y: float, grid=(0.0, 25.0, 100001)) -> float:
    """max over a uniform grid of x*y - psi(x); an oracle for :func:`psi_star`."""
    lo, hi, n = grid
    n = int(n)
    if n < 1 or hi < lo:
        raise ValueError("empty grid")
    xs = np.linspace(lo, hi, n)
    vals = xs * y - np.asarray(psi(spec, xs))
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise ValueError("entropy is infinite on the whole grid")
    return float(vals.max())
