"""Ground-truth discrete solvers.

* :func:`solve_discrete_uot` minimises the unbalanced primal
  ``<C, pi> + D_psi1(pi 1 | mu) + D_psi2(pi^T 1 | nu)`` over nonnegative
  couplings by exponentiated gradient (``pi = exp(S)``) with Armijo
  backtracking.  The objective is convex, so a KKT point is a global optimum.
  Plain exponentiated gradient crawls on near-degenerate instances, so by
  default it starts from a dual solution (SLSQP on the potentials, an LP
  plan on the tight edges, then a Newton polish of the KKT system) and only
  has to certify and refine it.
* :func:`w2_squared_1d` is the exact squared 2-Wasserstein distance between
  weighted 1D measures through their quantile functions.
* :func:`verify_theorem_bound` checks that the marginal divergences of the
  optimal unbalanced plan are bounded by ``tau * W2^2(mu, nu)``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scipy.optimize import linprog, minimize

from .divergence import (DiscreteMeasure, EntropySpec, _divergence_weights, psi,
                         psi_star, psi_star_prime)

SMOOTH = (EntropySpec.KL, EntropySpec.CHI2)


class SolverError(RuntimeError):
    """Solver stopped before reaching ``tol``; carries the best iterate."""

    def __init__(self, message, solution):
        super().__init__(message)
        self.solution = solution


@dataclass
class Coupling:
    matrix: np.ndarray
    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        if np.any(self.matrix < 0) or not np.all(np.isfinite(self.matrix)):
            raise ValueError("coupling entries must be finite and nonnegative")


@dataclass
class UotSolution:
    coupling: Coupling
    objective: float
    source_marginal: DiscreteMeasure
    target_marginal: DiscreteMeasure
    iterations: int
    residual: float

    def to_dict(self) -> dict:
        return {
            "coupling": self.coupling.matrix.tolist(),
            "objective": self.objective,
            "marginals": {"source": self.source_marginal.weights.tolist(),
                          "target": self.target_marginal.weights.tolist()},
            "iterations": self.iterations,
            "residual": self.residual,
        }


def _psi_prime(spec, t):
    if spec is EntropySpec.KL:
        return np.log(t)
    if spec is EntropySpec.CHI2:
        return 2.0 * (t - 1.0)
    raise ValueError(f"solver supports only KL and CHI2 penalties, got {spec}")


def uot_objective(cost, pi, mu_w, nu_w, psi1, psi2) -> float:
    a = pi.sum(axis=1)
    b = pi.sum(axis=0)
    return (float(np.sum(cost * pi)) + _divergence_weights(psi1, a, mu_w)
            + _divergence_weights(psi2, b, nu_w))


def _objective_fast(cost, pi, mu_w, nu_w, psi1, psi2):
    a = pi.sum(axis=1) / mu_w
    b = pi.sum(axis=0) / nu_w
    return (np.sum(cost * pi) + np.dot(mu_w, psi(psi1, a)) + np.dot(nu_w, psi(psi2, b)))


def _psi_star_second(spec, x):
    if spec is EntropySpec.KL:
        return np.exp(x)
    return np.where(x >= -2.0, 0.5, 0.0)


def _dual_potentials(C, mw, nw, psi1, psi2):
    """Maximise ``-<mu, psi1*(-f)> - <nu, psi2*(-g)>`` subject to ``f + g <= C``."""
    n, m = C.shape

    def neg_dual(x):
        f, g = x[:n], x[n:]
        val = mw @ psi_star(psi1, -f) + nw @ psi_star(psi2, -g)
        grad = np.concatenate([-mw * psi_star_prime(psi1, -f), -nw * psi_star_prime(psi2, -g)])
        return val, grad

    A = np.zeros((n * m, n + m))
    A[np.arange(n * m), np.repeat(np.arange(n), m)] = 1.0
    A[np.arange(n * m), n + np.tile(np.arange(m), n)] = 1.0
    f0 = C.min(axis=1)
    g0 = np.min(C - f0[:, None], axis=0)
    box = float(np.max(np.abs(C))) + 20.0
    res = minimize(neg_dual, np.concatenate([f0, g0]), jac=True, method="SLSQP",
                   bounds=[(-box, box)] * (n + m),
                   constraints=[{"type": "ineq", "fun": lambda x: C.ravel() - A @ x,
                                 "jac": lambda x: -A}],
                   options={"ftol": 1e-15, "maxiter": 1000})
    return res.x[:n], res.x[n:]


def _plan_on_tight_edges(C, f, g, a, b, slack_tol=1e-7):
    n, m = C.shape
    b = b * a.sum() / b.sum()
    tight = (C - f[:, None] - g[None, :]) < slack_tol
    a_eq = np.vstack([np.kron(np.eye(n), np.ones(m)), np.kron(np.ones(n), np.eye(m))])
    lp = linprog(np.where(tight, C, C + 1e3).ravel(), A_eq=a_eq, b_eq=np.concatenate([a, b]),
                 bounds=(0, None), method="highs")
    if lp.status != 0:
        raise ValueError(lp.message)
    pi = lp.x.reshape(n, m)
    return np.where(tight, pi, 0.0)


def _newton_polish(C, mw, nw, psi1, psi2, f, g, pi, iters=30):
    """Newton (least squares) on the KKT equations restricted to the plan's support.

    Unknowns are the potentials and the support entries; equations are
    tightness ``f_i + g_j = C_ij`` on the support and the two marginal
    identities ``pi 1 = mu psi1*'(-f)``, ``pi^T 1 = nu psi2*'(-g)``.
    """
    n, m = C.shape
    E = np.argwhere(pi > 0)
    k = len(E)
    rows = np.arange(k)
    x = np.concatenate([f, g, pi[E[:, 0], E[:, 1]]])
    for _ in range(iters):
        f, g, w = x[:n], x[n:n + m], x[n + m:]
        F = np.concatenate([
            f[E[:, 0]] + g[E[:, 1]] - C[E[:, 0], E[:, 1]],
            np.bincount(E[:, 0], w, n) - mw * psi_star_prime(psi1, -f),
            np.bincount(E[:, 1], w, m) - nw * psi_star_prime(psi2, -g),
        ])
        if np.max(np.abs(F)) < 1e-15:
            break
        J = np.zeros((k + n + m, n + m + k))
        J[rows, E[:, 0]] = 1.0
        J[rows, n + E[:, 1]] = 1.0
        J[k + E[:, 0], n + m + rows] = 1.0
        J[k + n + E[:, 1], n + m + rows] = 1.0
        J[k + np.arange(n), np.arange(n)] = mw * _psi_star_second(psi1, -f)
        J[k + n + np.arange(m), n + np.arange(m)] = nw * _psi_star_second(psi2, -g)
        x = x - np.linalg.lstsq(J, F, rcond=None)[0]
    out = np.zeros((n, m))
    out[E[:, 0], E[:, 1]] = np.maximum(x[n + m:], 0.0)
    return out


def _dual_warm_start(C, mw, nw, psi1, psi2):
    f, g = _dual_potentials(C, mw, nw, psi1, psi2)
    a = mw * psi_star_prime(psi1, -f)
    b = nw * psi_star_prime(psi2, -g)
    pi = _plan_on_tight_edges(C, f, g, a, b)
    return _newton_polish(C, mw, nw, psi1, psi2, f, g, pi)


def solve_discrete_uot(cost, mu: DiscreteMeasure, nu: DiscreteMeasure,
                       psi1: EntropySpec = EntropySpec.KL, psi2: EntropySpec = EntropySpec.KL,
                       tol: float = 1e-9, max_iter: int = 200000,
                       warm_start: bool = True, callback=None) -> UotSolution:
    """Minimise the discrete unbalanced OT primal.

    Parameters
    ----------
    cost : (n, m) array
        Transport cost, with any scale factor already applied.
    mu, nu : DiscreteMeasure
        Reference marginals; every weight must be positive.
    psi1, psi2 : EntropySpec
        KL or CHI2.
    tol : float
        Stop when ``max|pi * G| + max(0, -min G) < tol`` where ``G`` is the
        gradient of the objective in ``pi``.
    warm_start : bool
        Start the exponentiated-gradient loop from a dual solution instead of
        ``mu nu^T``.  Falls back to the cold start if the dual step fails.
    callback : callable, optional
        Called as ``callback(iteration, objective)`` after every accepted step.

    Raises
    ------
    SolverError
        If ``max_iter`` iterations do not reach ``tol``.
    """
    psi1 = EntropySpec.parse(psi1)
    psi2 = EntropySpec.parse(psi2)
    if psi1 not in SMOOTH or psi2 not in SMOOTH:
        raise ValueError("solve_discrete_uot supports KL and CHI2 penalties")
    if not tol > 0:
        raise ValueError("tol must be positive")
    C = np.asarray(cost, dtype=float)
    mw, nw = mu.weights, nu.weights
    if C.shape != (len(mw), len(nw)):
        raise ValueError(f"cost shape {C.shape} does not match measures ({len(mw)}, {len(nw)})")
    if np.any(mw <= 0) or np.any(nw <= 0):
        raise ValueError("reference weights must be positive")

    cold = np.outer(mw, nw)
    starts = [cold]
    if warm_start:
        try:
            with np.errstate(all="ignore"):
                warm = _dual_warm_start(C, mw, nw, psi1, psi2)
            # empty rows are legitimate (CHI2 can drop an atom); the log floor handles them
            if np.all(np.isfinite(warm)) and warm.sum() > 0:
                starts.insert(0, warm)
        except (ValueError, np.linalg.LinAlgError):
            pass
    best = None
    for start in starts:
        # exact zeros are unreachable in log space; floor them far below tol
        S = np.log(np.maximum(start, 1e-14 * cold))
        pi, it, residual = _exponentiated_gradient(C, S, mw, nw, psi1, psi2, tol, max_iter,
                                                    callback)
        if best is None or residual < best[2]:
            best = (pi, it, residual)
        if residual < tol:
            break
    pi, it, residual = best
    sol = _solution(C, pi, mu, nu, psi1, psi2, it, residual)
    if residual >= tol:
        raise SolverError(f"no convergence after {it} iterations (residual {residual:.3e})", sol)
    return sol


def _exponentiated_gradient(C, S, mw, nw, psi1, psi2, tol, max_iter, callback=None):
    pi = np.exp(S)
    f = _objective_fast(C, pi, mw, nw, psi1, psi2)
    eta = 1.0
    it = 0
    residual = np.inf
    for it in range(1, max_iter + 1):
        G = (C + _psi_prime(psi1, pi.sum(axis=1) / mw)[:, None]
             + _psi_prime(psi2, pi.sum(axis=0) / nw)[None, :])
        residual = float(np.max(np.abs(pi * G)) + max(0.0, -float(G.min())))
        if residual < tol:
            break
        decrease = float(np.sum(pi * G * G))
        while True:
            S_new = S - eta * G
            pi_new = np.exp(S_new)
            f_new = _objective_fast(C, pi_new, mw, nw, psi1, psi2)
            if np.isfinite(f_new) and f_new <= f - 1e-4 * eta * decrease:
                break
            eta *= 0.5
            if eta < 1e-20:
                break
        if eta < 1e-20 or f_new > f:
            # no further descent possible at floating precision
            break
        S, pi, f = S_new, pi_new, f_new
        eta = min(eta * 2.0, 1e6)
        if callback is not None:
            callback(it, float(f))
    return pi, it, residual


def _solution(C, pi, mu, nu, psi1, psi2, it, residual) -> UotSolution:
    obj = uot_objective(C, pi, mu.weights, nu.weights, psi1, psi2)
    return UotSolution(
        Coupling(pi, mu.atoms, nu.atoms), obj,
        DiscreteMeasure(mu.atoms, pi.sum(axis=1)),
        DiscreteMeasure(nu.atoms, pi.sum(axis=0)),
        it, residual,
    )


def cost_matrix(x_atoms, y_atoms, tau: float = 1.0) -> np.ndarray:
    x = np.asarray(x_atoms, dtype=float)
    y = np.asarray(y_atoms, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    return tau * np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)


# ---------------------------------------------------------------- exact W2 in 1D


def w2_squared_1d(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Squared W2 between equal-mass measures on R via quantile functions."""
    if mu.atoms.shape[1] != 1 or nu.atoms.shape[1] != 1:
        raise ValueError("w2_squared_1d needs 1D atoms")
    if abs(mu.mass - nu.mass) > 1e-12:
        raise ValueError(f"masses differ: {mu.mass} vs {nu.mass}")
    xa, xw = _sorted(mu)
    ya, yw = _sorted(nu)
    cx = np.cumsum(xw)
    cy = np.cumsum(yw)
    mass = cx[-1]
    cx[-1] = cy[-1] = mass
    knots = np.unique(np.concatenate([[0.0], cx, cy]))
    knots = knots[knots <= mass]
    lo, hi = knots[:-1], knots[1:]
    mid = 0.5 * (lo + hi)
    qx = xa[np.minimum(np.searchsorted(cx, mid), len(xa) - 1)]
    qy = ya[np.minimum(np.searchsorted(cy, mid), len(ya) - 1)]
    return float(np.sum((hi - lo) * (qx - qy) ** 2))


def _sorted(m: DiscreteMeasure):
    order = np.argsort(m.atoms[:, 0], kind="stable")
    return m.atoms[order, 0], m.weights[order]


def w2_squared_permutations(x, y) -> float:
    """Brute-force min over permutations for equal-size uniform measures."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("need equal sizes")
    best = np.inf
    for perm in itertools.permutations(range(y.size)):
        best = min(best, float(np.mean((x - y[list(perm)]) ** 2)))
    return best


# ---------------------------------------------------------------- bound check


@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool
    slack: float
    budget: float
    solution: UotSolution | None = None

    def as_row(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "holds": self.holds,
                "slack": self.slack, "budget": self.budget}


def verify_theorem_bound(mu: DiscreteMeasure, nu: DiscreteMeasure, tau: float,
                         psi1=EntropySpec.KL, psi2=EntropySpec.KL, tol: float = 1e-8) -> BoundCheck:
    """Compare marginal divergences of the optimal plan with ``tau * W2^2``.

    The optimal plan's marginals stand in for the reweighted measures of the
    bound; ``holds`` allows a solver budget of ``10 * tol``.
    """
    psi1 = EntropySpec.parse(psi1)
    psi2 = EntropySpec.parse(psi2)
    for m in (mu, nu):
        if abs(m.mass - 1.0) > 1e-9:
            raise ValueError("verify_theorem_bound needs probability measures")
    sol = solve_discrete_uot(cost_matrix(mu.atoms, nu.atoms, tau), mu, nu, psi1, psi2, tol)
    lhs = (_divergence_weights(psi1, sol.source_marginal.weights, mu.weights)
           + _divergence_weights(psi2, sol.target_marginal.weights, nu.weights))
    rhs = tau * w2_squared_1d(mu, nu)
    budget = 10.0 * tol
    slack = rhs - lhs
    return BoundCheck(lhs, rhs, bool(lhs <= rhs + budget), slack, budget, sol)


def random_instance(rng: np.random.Generator, min_atoms: int = 2, max_atoms: int = 8,
                    tau_range=(0.01, 1.0), entropies=SMOOTH) -> dict:
    """Random pair of 1D probability measures with a tau and penalty pair."""
    n = int(rng.integers(min_atoms, max_atoms + 1))
    m = int(rng.integers(min_atoms, max_atoms + 1))
    mu = DiscreteMeasure(rng.uniform(-3, 3, n), rng.dirichlet(np.ones(n)))
    nu = DiscreteMeasure(rng.uniform(-3, 3, m), rng.dirichlet(np.ones(m)))
    lo, hi = np.log(tau_range[0]), np.log(tau_range[1])
    tau = float(np.exp(rng.uniform(lo, hi)))
    psi1 = entropies[int(rng.integers(len(entropies)))]
    psi2 = entropies[int(rng.integers(len(entropies)))]
    return {"mu": mu, "nu": nu, "tau": tau, "psi1": psi1, "psi2": psi2}


# ---------------------------------------------------------------- c-transform


def c_transform_1d(v, x: float, tau: float, grid) -> float:
    """min over grid points y of tau (x - y)^2 - v(y)."""
    ys = np.asarray(grid, dtype=float).ravel()
    if ys.size == 0:
        raise ValueError("empty grid")
    vals = tau * (x - ys) ** 2 - np.asarray(v(ys), dtype=float).ravel()
    return float(vals.min())


def c_transform_argmin_1d(v, x: float, tau: float, grid) -> float:
    ys = np.asarray(grid, dtype=float).ravel()
    if ys.size == 0:
        raise ValueError("empty grid")
    vals = tau * (x - ys) ** 2 - np.asarray(v(ys), dtype=float).ravel()
    return float(ys[int(np.argmin(vals))])


# ---------------------------------------------------------------- JSON I/O


def _measure_dict(m: DiscreteMeasure) -> dict:
    atoms = m.atoms[:, 0] if m.atoms.shape[1] == 1 else m.atoms
    return {"atoms": atoms.tolist(), "weights": m.weights.tolist()}


def instance_to_dict(inst: dict) -> dict:
    return {
        "mu": _measure_dict(inst["mu"]),
        "nu": _measure_dict(inst["nu"]),
        "tau": inst["tau"],
        "psi1": str(EntropySpec.parse(inst["psi1"])),
        "psi2": str(EntropySpec.parse(inst["psi2"])),
    }


def instance_from_dict(d: dict) -> dict:
    return {
        "mu": DiscreteMeasure(d["mu"]["atoms"], d["mu"]["weights"]),
        "nu": DiscreteMeasure(d["nu"]["atoms"], d["nu"]["weights"]),
        "tau": float(d["tau"]),
        "psi1": EntropySpec.parse(d["psi1"]),
        "psi2": EntropySpec.parse(d["psi2"]),
    }


def write_instance(path, inst: dict) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(inst), indent=1))


def read_instance(path) -> dict:
    return instance_from_dict(json.loads(Path(path).read_text()))


def write_solution(path, sol: UotSolution) -> None:
    Path(path).write_text(json.dumps(sol.to_dict(), indent=1))
