"""Alternating potential / generator training with semi-dual UOT losses.

The potential loss for a batch is

    mean_x psi1*(-c(x, T(x,z)) + v(T(x,z))) + mean_y psi2*(-v(y))
        + lambda * mean_y |grad_y v(y)|^2

and the generator loss is ``mean_x c(x, T(x,z)) - v(T(x,z))``.  With both
conjugates set to the identity this is the OT semi-dual (OTM); with only
``psi1`` set to the identity the source marginal is hard-constrained
(Fixed-mu).
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diffcore as dc
from .divergence import EntropySpec, psi_star_node
from .model import (ArchSpec, Bound, ModelParams, bind, generator_forward,
                    init_params, potential_forward)

log = logging.getLogger(__name__)

Sampler = Callable[[np.random.Generator, int], np.ndarray]

VARIANTS = ("UOTM", "OTM", "FIXED_MU")


class TrainingDiverged(FloatingPointError):
    """Raised when a loss is non-finite or exceeds the divergence threshold."""


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.1
    psi1: EntropySpec = EntropySpec.KL
    psi2: EntropySpec = EntropySpec.KL
    lambda_r1: float = 0.01
    batch_size: int = 256
    epochs: int = 2000
    disc_steps: int = 5
    lr_v: float = 1e-4
    lr_T: float = 1e-4
    betas: tuple = (0.5, 0.9)
    seed: int = 0
    arch: ArchSpec = field(default_factory=ArchSpec)
    dataset_size: int = 4000
    eval_interval: int = 100
    divergence_threshold: float = 1e6

    def __post_init__(self):
        object.__setattr__(self, "psi1", EntropySpec.parse(self.psi1))
        object.__setattr__(self, "psi2", EntropySpec.parse(self.psi2))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.lambda_r1 < 0:
            raise ValueError("lambda_r1 must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.disc_steps < 1:
            raise ValueError("disc_steps must be at least 1")
        if not (self.lr_v > 0 and self.lr_T > 0):
            raise ValueError("learning rates must be positive")
        if self.epochs < 0 or self.eval_interval < 1:
            raise ValueError("epochs must be >= 0 and eval_interval >= 1")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.dataset_size // self.batch_size)


def make_variant(name: str, base: TrainConfig, psi: EntropySpec | str | None = None) -> TrainConfig:
    """UOTM keeps the base pair, OTM sets both conjugates to the identity,
    FIXED_MU sets only the source one."""
    key = str(name).upper().replace("-", "_")
    if key == "UOTM":
        if psi is None:
            return base
        return dataclasses.replace(base, psi1=psi, psi2=psi)
    if key == "OTM":
        return dataclasses.replace(base, psi1=EntropySpec.IDENTITY, psi2=EntropySpec.IDENTITY)
    if key in ("FIXED_MU", "FIXEDMU"):
        return dataclasses.replace(base, psi1=EntropySpec.IDENTITY)
    raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------- losses


def cost(x, y, tau: float):
    """Quadratic cost tau * |x - y|^2 over the last axis."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"cost needs equal shapes, got {x.shape} and {y.shape}")
    d = x - y
    return tau * np.sum(d * d, axis=-1)


def cost_node(x: dc.Node, y: dc.Node, tau: float) -> dc.Node:
    """Row-wise cost of two (n, d) nodes, shape (n, 1)."""
    return dc.mul(dc.sum(dc.pow2(dc.sub(x, y)), axis=1), tau)


def _network(fn, tape, kind):
    if isinstance(fn, Bound):
        return (lambda *a: potential_forward(fn, *a)) if kind == "v" else (lambda *a: generator_forward(fn, *a))
    if isinstance(fn, ModelParams):
        b = bind(fn, tape, requires_grad=False)
        return (lambda *a: potential_forward(b, *a)) if kind == "v" else (lambda *a: generator_forward(b, *a))
    if callable(fn):
        return fn
    raise TypeError(f"cannot use {type(fn).__name__} as a network")


def _tape_for(*objs) -> dc.Tape:
    for o in objs:
        if isinstance(o, Bound):
            return o.tape
    return dc.Tape()


def _col(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _check(loss: dc.Node, what: str) -> None:
    if not np.isfinite(loss.value):
        raise TrainingDiverged(f"{what} is not finite ({loss.value})")


def transport(generator, x, z) -> np.ndarray:
    """Generator output as an array, off the training tape."""
    if isinstance(generator, Bound):
        generator = generator.params
    tape = dc.Tape()
    t = _network(generator, tape, "T")
    return np.asarray(t(tape.constant(_col(x)), tape.constant(_col(z))).value)


def potential_loss(config: TrainConfig, potential, generator, x, y, z,
                   tape: dc.Tape | None = None) -> dc.Node:
    """Potential objective on one batch, including the R1 term.

    ``potential`` may be a :class:`Bound` (its leaves receive gradients),
    plain :class:`ModelParams`, or a callable mapping a node to an (n, 1)
    node.  ``generator`` is treated as frozen: its outputs are detached.
    """
    tape = tape if tape is not None else _tape_for(potential)
    v = _network(potential, tape, "v")
    x = _col(x)
    y = _col(y)
    fake = transport(generator, x, z)
    c = cost(x, fake, config.tau)[:, None]
    v_fake = v(tape.constant(fake))
    src = dc.mean(psi_star_node(config.psi1, dc.add(v_fake, tape.constant(-c))))
    y_node = tape.leaf(y) if config.lambda_r1 > 0 else tape.constant(y)
    v_real = v(y_node)
    tgt = dc.mean(psi_star_node(config.psi2, dc.neg(v_real)))
    loss = dc.add(src, tgt)
    if config.lambda_r1 > 0:
        r1 = dc.grad_norm_sq(tape, dc.sum(v_real), [y_node])
        loss = dc.add(loss, dc.mul(r1, config.lambda_r1 / y.shape[0]))
    _check(loss, "potential loss")
    return loss


def generator_loss(config: TrainConfig, potential, generator, x, z,
                   tape: dc.Tape | None = None) -> dc.Node:
    """Generator objective ``mean(c(x, T(x,z)) - v(T(x,z)))``; ``potential`` is frozen."""
    tape = tape if tape is not None else _tape_for(generator)
    t = _network(generator, tape, "T")
    v = _network(potential, tape, "v")
    x_node = tape.constant(_col(x))
    fake = t(x_node, tape.constant(_col(z)))
    loss = dc.mean(dc.sub(cost_node(x_node, fake, config.tau), v(fake)))
    _check(loss, "generator loss")
    return loss


# ---------------------------------------------------------------- Adam


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "OptimizerState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray,
              lr: float, betas=(0.5, 0.9), eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("Adam shapes disagree")
    b1, b2 = betas
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return OptimizerState(m, v, t), new


# ---------------------------------------------------------------- training run


@dataclass
class EpochRecord:
    epoch: int
    loss_v: float
    loss_T: float
    kl: float = math.nan
    monotonicity: float = math.nan
    outlier_mass: float = math.nan
    wall_time: float = field(default=0.0, compare=False)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunReport:
    records: list = field(default_factory=list)
    diverged: bool = False
    failure: str = ""

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    @property
    def final(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None

    def to_jsonl(self, wall_time: bool = True) -> str:
        """One JSON object per record; ``wall_time=False`` keeps it reproducible."""
        import json
        rows = [r.as_dict() for r in self.records]
        if not wall_time:
            for row in rows:
                row.pop("wall_time")
        lines = [json.dumps(row) for row in rows]
        if self.diverged:
            lines.append(json.dumps({"status": "diverged", "failure": self.failure}))
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class Models:
    generator: ModelParams
    potential: ModelParams


def initial_models(config: TrainConfig) -> Models:
    """Fresh networks for ``config.seed``; the potential starts at v = 0.

    A zero potential keeps ``exp(v(T) - c)`` style conjugates bounded at the
    first step; Kaiming-scaled residual nets otherwise start with |v| in the
    tens to hundreds.
    """
    ss = np.random.SeedSequence(config.seed)
    k_t, k_v, _ = ss.spawn(3)
    return Models(init_params(config.arch, np.random.default_rng(k_t), "generator"),
                  init_params(config.arch, np.random.default_rng(k_v), "potential", zero_head=True))


def dataset_sampler(points: np.ndarray) -> Sampler:
    """Minibatches drawn without replacement from a fixed dataset."""
    points = _col(points)

    def sample(rng, n):
        idx = rng.choice(points.shape[0], size=n, replace=points.shape[0] < n)
        return points[idx]

    return sample


def train(config: TrainConfig, source: Sampler, target: Sampler,
          evaluator: Callable[[Models, int], dict] | None = None,
          models: Models | None = None) -> tuple[Models, RunReport]:
    """Run the alternating scheme for ``config.epochs`` epochs.

    Each generator step is preceded by ``config.disc_steps`` potential steps;
    an epoch is ``config.steps_per_epoch`` generator steps.  Metrics are
    recorded every ``eval_interval`` epochs and at the last epoch.  On
    divergence the run stops and the report is flagged.
    """
    models = models or initial_models(config)
    report = RunReport()
    if config.epochs == 0:
        return models, report
    ss = np.random.SeedSequence(config.seed)
    _, _, k_data = ss.spawn(3)
    rng = np.random.default_rng(k_data)
    pv, pt = models.potential, models.generator
    opt_v = OptimizerState.zeros(pv.size)
    opt_t = OptimizerState.zeros(pt.size)
    B, zd = config.batch_size, config.arch.z_dim
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        sum_v = sum_t = 0.0
        n_v = n_t = 0
        try:
            for _ in range(config.steps_per_epoch):
                for _ in range(config.disc_steps):
                    x, y, z = source(rng, B), target(rng, B), rng.standard_normal((B, zd))
                    tape = dc.Tape()
                    bv = bind(pv, tape)
                    loss = potential_loss(config, bv, pt, x, y, z, tape)
                    lv = float(loss.value)
                    if abs(lv) > config.divergence_threshold:
                        raise TrainingDiverged(f"|potential loss| = {abs(lv):.3g} exceeds threshold")
                    g = bv.flat_grad(dc.backward(tape, loss))
                    opt_v, flat = adam_step(opt_v, pv.flat, g, config.lr_v, config.betas)
                    if not np.all(np.isfinite(flat)):
                        raise TrainingDiverged("potential parameters became non-finite")
                    pv = pv.replace(flat)
                    sum_v += lv
                    n_v += 1
                x, z = source(rng, B), rng.standard_normal((B, zd))
                tape = dc.Tape()
                bt = bind(pt, tape)
                loss = generator_loss(config, pv, bt, x, z, tape)
                g = bt.flat_grad(dc.backward(tape, loss))
                opt_t, flat = adam_step(opt_t, pt.flat, g, config.lr_T, config.betas)
                if not np.all(np.isfinite(flat)):
                    raise TrainingDiverged("generator parameters became non-finite")
                pt = pt.replace(flat)
                sum_t += float(loss.value)
                n_t += 1
        except TrainingDiverged as exc:
            report.diverged = True
            report.failure = f"epoch {epoch}: {exc}"
            log.warning("run diverged at %s", report.failure)
            rec = EpochRecord(epoch, sum_v / max(n_v, 1), sum_t / max(n_t, 1),
                              wall_time=time.perf_counter() - start)
            report.append(rec)
            break
        if epoch % config.eval_interval == 0 or epoch == config.epochs:
            rec = EpochRecord(epoch, sum_v / n_v, sum_t / n_t)
            if evaluator is not None:
                for k, val in evaluator(Models(pt, pv), epoch).items():
                    setattr(rec, k, float(val))
            rec.wall_time = time.perf_counter() - start
            report.append(rec)
            log.info("epoch %d  L_v=%.4f  L_T=%.4f  kl=%.4f", epoch, rec.loss_v, rec.loss_T, rec.kl)
    return Models(pt, pv), report
