"""Toy generator ``T(x, z)`` and potential ``v(y)`` networks.

Both networks are MLPs with SiLU activations and residual blocks:

* generator: ``z -> FC -> SiLU -> FC`` (z embedding) plus
  ``x -> FC -> ResBlock x n`` (x embedding); the two embeddings are summed
  and fed through ``FC -> SiLU -> FC``.
* potential: ``y -> FC -> ResBlock x n -> FC -> SiLU -> FC`` with scalar output.

A residual block is ``h + FC(SiLU(FC(SiLU(h))))`` at constant width.

Parameters live in one flat float64 vector with a layer table of
``(name, shape, offset)`` so that optimizers work on plain arrays.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc

ACTIVATIONS = {"silu": dc.silu, "relu": dc.relu, "tanh": dc.tanh}

CHECKPOINT_FORMAT = "uotm-checkpoint/1"


@dataclass(frozen=True)
class ArchSpec:
    data_dim: int = 1
    z_dim: int = 1
    hidden: int = 128
    blocks: int = 3
    activation: str = "silu"

    def __post_init__(self):
        for name in ("data_dim", "z_dim", "hidden", "blocks"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")


def _linear_shapes(name, fan_in, fan_out):
    return [(f"{name}.w", (fan_in, fan_out)), (f"{name}.b", (fan_out,))]


def layer_table(arch: ArchSpec, role: str) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` list for ``role`` in {"generator", "potential"}."""
    d, h = arch.data_dim, arch.hidden
    shapes = []
    if role == "generator":
        shapes += _linear_shapes("z_fc1", arch.z_dim, h)
        shapes += _linear_shapes("z_fc2", h, h)
        shapes += _linear_shapes("x_in", d, h)
        for i in range(arch.blocks):
            shapes += _linear_shapes(f"x_block{i}.fc1", h, h)
            shapes += _linear_shapes(f"x_block{i}.fc2", h, h)
        shapes += _linear_shapes("out_fc1", h, h)
        shapes += _linear_shapes("out_fc2", h, d)
    elif role == "potential":
        shapes += _linear_shapes("y_in", d, h)
        for i in range(arch.blocks):
            shapes += _linear_shapes(f"y_block{i}.fc1", h, h)
            shapes += _linear_shapes(f"y_block{i}.fc2", h, h)
        shapes += _linear_shapes("out_fc1", h, h)
        shapes += _linear_shapes("out_fc2", h, 1)
    else:
        raise ValueError(f"unknown role {role!r}")
    return shapes


class ModelParams:
    """Flat parameter vector plus layer metadata.  Treated as immutable."""

    def __init__(self, arch: ArchSpec, role: str, flat: np.ndarray):
        self.arch = arch
        self.role = role
        self.layers = []
        offset = 0
        for name, shape in layer_table(arch, role):
            size = int(np.prod(shape))
            self.layers.append((name, shape, offset))
            offset += size
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (offset,):
            raise ValueError(f"expected {offset} parameters, got {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        self.flat = flat
        self.flat.flags.writeable = False

    @property
    def size(self) -> int:
        return self.flat.size

    def __getitem__(self, name) -> np.ndarray:
        for lname, shape, offset in self.layers:
            if lname == name:
                return self.flat[offset:offset + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def named(self):
        for name, shape, offset in self.layers:
            yield name, self.flat[offset:offset + int(np.prod(shape))].reshape(shape)

    def replace(self, flat) -> "ModelParams":
        return ModelParams(self.arch, self.role, flat)

    def __eq__(self, other):
        return (isinstance(other, ModelParams) and self.arch == other.arch
                and self.role == other.role and np.array_equal(self.flat, other.flat))

    def __repr__(self):
        return f"ModelParams(role={self.role!r}, size={self.size}, arch={self.arch})"


def param_count(arch: ArchSpec, role: str) -> int:
    return sum(int(np.prod(s)) for _, s in layer_table(arch, role))


def init_params(arch: ArchSpec, seed, role: str = "generator",
                zero_head: bool = False) -> ModelParams:
    """Kaiming-normal weights (ReLU gain), zero biases.  Deterministic in ``seed``.

    With ``zero_head`` the final linear layer starts at zero, so the network
    outputs 0 for every input.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    for name, shape in layer_table(arch, role):
        if name.endswith(".w") and not (zero_head and name.startswith("out_fc2")):
            std = np.sqrt(2.0 / shape[0])
            chunks.append(rng.normal(0.0, std, size=shape).ravel())
        else:
            chunks.append(np.zeros(int(np.prod(shape))))
    return ModelParams(arch, role, np.concatenate(chunks))


class Bound:
    """Parameters placed on a tape as leaves (or constants)."""

    def __init__(self, params: ModelParams, tape: dc.Tape, requires_grad: bool = True):
        self.params = params
        self.tape = tape
        self.nodes = {}
        for name, value in params.named():
            self.nodes[name] = tape.leaf(value, requires_grad=requires_grad)

    def __getitem__(self, name) -> dc.Node:
        return self.nodes[name]

    def flat_grad(self, adjoints) -> np.ndarray:
        """Gather adjoints of the parameter leaves into one flat vector."""
        out = np.zeros(self.params.size)
        for name, shape, offset in self.params.layers:
            g = adjoints[self.nodes[name].id]
            if g is not None:
                out[offset:offset + int(np.prod(shape))] = np.asarray(g).ravel()
        return out


def bind(params: ModelParams, tape: dc.Tape, requires_grad: bool = True) -> Bound:
    return Bound(params, tape, requires_grad)


def _as_bound(params, tape) -> Bound:
    if isinstance(params, Bound):
        return params
    if isinstance(params, ModelParams):
        return Bound(params, tape, requires_grad=False)
    raise TypeError(f"expected ModelParams or Bound, got {type(params).__name__}")


def _as_node(tape, x) -> dc.Node:
    if isinstance(x, dc.Node):
        return x
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return tape.constant(x)


def _linear(b: Bound, name: str, h: dc.Node) -> dc.Node:
    return dc.add(dc.dot(h, b[f"{name}.w"]), b[f"{name}.b"])


def _res_block(b: Bound, name: str, h: dc.Node, act) -> dc.Node:
    u = _linear(b, f"{name}.fc1", act(h))
    u = _linear(b, f"{name}.fc2", act(u))
    return dc.add(h, u)


def _pick_tape(params, *xs):
    if isinstance(params, Bound):
        return params.tape
    for x in xs:
        if isinstance(x, dc.Node):
            return x.tape
    return dc.Tape()


def generator_forward(params, x, z, tape: dc.Tape | None = None) -> dc.Node:
    """``T(x, z)`` for a batch: x of shape (n, d), z of shape (n, z_dim)."""
    tape = tape if tape is not None else _pick_tape(params, x, z)
    b = _as_bound(params, tape)
    arch = b.params.arch
    if b.params.role != "generator":
        raise ValueError("generator_forward needs generator parameters")
    x = _as_node(tape, x)
    z = _as_node(tape, z)
    if x.value.ndim != 2 or x.value.shape[1] != arch.data_dim:
        raise ValueError(f"x must have shape (n, {arch.data_dim}), got {x.value.shape}")
    if z.value.ndim != 2 or z.value.shape[1] != arch.z_dim or z.value.shape[0] != x.value.shape[0]:
        raise ValueError(f"z must have shape ({x.value.shape[0]}, {arch.z_dim}), got {z.value.shape}")
    act = ACTIVATIONS[arch.activation]
    ez = _linear(b, "z_fc2", act(_linear(b, "z_fc1", z)))
    ex = _linear(b, "x_in", x)
    for i in range(arch.blocks):
        ex = _res_block(b, f"x_block{i}", ex, act)
    h = dc.add(ex, ez)
    return _linear(b, "out_fc2", act(_linear(b, "out_fc1", h)))


def potential_forward(params, y, tape: dc.Tape | None = None) -> dc.Node:
    """``v(y)`` for a batch: y of shape (n, d); returns shape (n, 1)."""
    tape = tape if tape is not None else _pick_tape(params, y)
    b = _as_bound(params, tape)
    arch = b.params.arch
    if b.params.role != "potential":
        raise ValueError("potential_forward needs potential parameters")
    y = _as_node(tape, y)
    if y.value.ndim != 2 or y.value.shape[1] != arch.data_dim:
        raise ValueError(f"y must have shape (n, {arch.data_dim}), got {y.value.shape}")
    act = ACTIVATIONS[arch.activation]
    h = _linear(b, "y_in", y)
    for i in range(arch.blocks):
        h = _res_block(b, f"y_block{i}", h, act)
    return _linear(b, "out_fc2", act(_linear(b, "out_fc1", h)))


def generate(params: ModelParams, x, z) -> np.ndarray:
    """Convenience: generator output as a plain array."""
    return generator_forward(params, x, z).value


def potential(params: ModelParams, y) -> np.ndarray:
    return potential_forward(params, y).value


# ---------------------------------------------------------------- checkpoints


def checkpoint_dict(params: ModelParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "role": params.role,
        "arch": asdict(params.arch),
        "layers": [{"name": n, "shape": list(s), "offset": o} for n, s, o in params.layers],
        "values": params.flat.tolist(),
    }


def params_from_dict(d: dict) -> ModelParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
    arch = ArchSpec(**d["arch"])
    params = ModelParams(arch, d["role"], np.array(d["values"], dtype=np.float64))
    recorded = [(l["name"], tuple(l["shape"]), l["offset"]) for l in d["layers"]]
    if recorded != params.layers:
        raise ValueError("checkpoint layer table does not match its architecture")
    return params


def save_checkpoint(path, *params: ModelParams) -> None:
    """Write one or more parameter sets to a JSON checkpoint."""
    payload = {"format": CHECKPOINT_FORMAT, "models": [checkpoint_dict(p) for p in params]}
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> dict[str, ModelParams]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a uotm checkpoint")
    models = [params_from_dict(m) for m in payload["models"]]
    return {m.role: m for m in models}
