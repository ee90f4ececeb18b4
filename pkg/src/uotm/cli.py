"""Command-line runner for the toy experiments, sweeps and reports.

Configuration is a flat ``key = value`` text file.  Values are resolved in
the order built-in defaults, ``--preset``, ``--config`` file, then flags, and
the resolved configuration is echoed to ``config.txt`` in the output
directory.  Re-running from that echo regenerates every artifact except
``timing.json`` bit for bit.

Exit codes: 0 success, 1 run divergence or failed bound, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import oracle
from .divergence import EntropySpec
from .model import ArchSpec, save_checkpoint
from .trainer import VARIANTS, TrainConfig, dataset_sampler, make_variant, train

log = logging.getLogger("uotm")

EXPERIMENTS = ("matching", "outlier", "bound_check", "ablation_lambda", "ablation_tau", "ablation_psi")

# resolved config keys and their defaults; the types of the defaults drive parsing
DEFAULTS = {
    "experiment": "matching",
    "variant": "UOTM",
    "tau": 0.1,
    "psi1": "KL",
    "psi2": "KL",
    "lambda_r1": 0.01,
    "batch_size": 256,
    "epochs": 2000,
    "disc_steps": 5,
    "lr_v": 1e-4,
    "lr_T": 1e-4,
    "beta1": 0.5,
    "beta2": 0.9,
    "seed": 0,
    "hidden": 128,
    "blocks": 3,
    "z_dim": 1,
    "activation": "silu",
    "dataset_size": 4000,
    "data_seed": 0,
    "eval_interval": 100,
    "eval_n": 4000,
    "divergence_threshold": 1e6,
    "instances": 100,
    "degrade_factor": 5.0,
}

# reduced width and schedule that fits the acceptance suite on one CPU
PRESETS = {
    "paper": {},
    "desk": {"hidden": 16, "epochs": 300, "lr_v": 3e-4, "lr_T": 3e-4, "eval_interval": 25},
}

ABLATIONS = {
    "ablation_lambda": ("lambda_r1", ["0", "0.01", "0.1"]),
    "ablation_tau": ("tau", ["0.02", "0.05", "0.1"]),
    "ablation_psi": ("psi", ["KL:KL", "CHI2:CHI2", "KL:CHI2", "CHI2:KL", "SOFTPLUS:SOFTPLUS"]),
}

SWEEP_AXES = {"tau": "tau", "lambda": "lambda_r1", "lambda_r1": "lambda_r1", "psi": "psi", "seed": "seed"}

METRICS = ("kl", "monotonicity", "outlier_mass")


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


# ---------------------------------------------------------------- configuration


def parse_value(key: str, text):
    """Parse ``text`` to the type of ``DEFAULTS[key]`` and validate enums."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            value = text.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            value = int(text)
        elif isinstance(default, float):
            value = float(text)
        else:
            value = text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    try:
        if key in ("psi1", "psi2"):
            value = EntropySpec.parse(value).name
        elif key == "variant":
            value = value.upper().replace("-", "_")
            if value not in VARIANTS:
                raise ValueError(f"variant must be one of {VARIANTS}")
        elif key == "experiment":
            value = value.lower()
            if value not in EXPERIMENTS:
                raise ValueError(f"experiment must be one of {EXPERIMENTS}")
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return value


def read_config_file(path) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def resolve_config(preset: str = "paper", file_values: dict | None = None,
                   overrides: dict | None = None) -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    cfg = dict(DEFAULTS)
    cfg.update(PRESETS[preset])
    for src in (file_values or {}, overrides or {}):
        for key, value in src.items():
            cfg[key] = parse_value(key, value)
    train_config(cfg)
    return cfg


def config_text(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]!r}\n" if isinstance(cfg[k], float) else f"{k} = {cfg[k]}\n"
                   for k in DEFAULTS)


def train_config(cfg: dict) -> TrainConfig:
    """TrainConfig for the variant in ``cfg``; raises ConfigError if invalid."""
    try:
        arch = ArchSpec(z_dim=cfg["z_dim"], hidden=cfg["hidden"], blocks=cfg["blocks"],
                        activation=cfg["activation"])
        base = TrainConfig(tau=cfg["tau"], psi1=cfg["psi1"], psi2=cfg["psi2"],
                           lambda_r1=cfg["lambda_r1"], batch_size=cfg["batch_size"],
                           epochs=cfg["epochs"], disc_steps=cfg["disc_steps"],
                           lr_v=cfg["lr_v"], lr_T=cfg["lr_T"], betas=(cfg["beta1"], cfg["beta2"]),
                           seed=cfg["seed"], arch=arch, dataset_size=cfg["dataset_size"],
                           eval_interval=cfg["eval_interval"],
                           divergence_threshold=cfg["divergence_threshold"])
        if cfg["eval_n"] < 3 or cfg["instances"] < 1:
            raise ValueError("eval_n must be >= 3 and instances >= 1")
        return make_variant(cfg["variant"], base)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- single runs


def experiment_data(cfg: dict):
    """(source sampler, fixed target dataset, kNN reference) for a toy experiment.

    The target is a fixed dataset of ``dataset_size`` points; source batches
    are drawn fresh from the source distribution.
    """
    if cfg["experiment"] == "outlier":
        src, tgt, ref = "STD_NORMAL", "OUTLIER_1D", "OUTLIER_CLEAN_1D"
    else:
        src, tgt, ref = "MATCH_SOURCE_1D", "MATCH_TARGET_1D", "MATCH_TARGET_1D"
    data = ex.sample_toy(ex.ToyDatasetSpec(tgt, cfg["dataset_size"], cfg["data_seed"])).points
    reference = ex.sample_toy(ex.ToyDatasetSpec(ref, cfg["eval_n"], cfg["data_seed"] + 1)).points
    return ex.toy_sampler(src), data, reference


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _fmt_metric(v):
    return float(v) if v is not None else math.nan


def run_training(cfg: dict, out) -> dict:
    """Train one matching or outlier run and write its artifacts to ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text(cfg))
    tc = train_config(cfg)
    source, data, reference = experiment_data(cfg)
    evaluator = ex.TransportEvaluator(source, reference, n=cfg["eval_n"], z_dim=tc.arch.z_dim)
    models, report = train(tc, source, dataset_sampler(data), evaluator)

    (out / "report.jsonl").write_text(report.to_jsonl(wall_time=False))
    (out / "timing.json").write_text(json.dumps(
        {"wall_time": [[r.epoch, r.wall_time] for r in report.records]}))
    _write_csv(out / "metrics.csv", ("epoch", "loss_v", "loss_T") + METRICS,
               [(r.epoch, r.loss_v, r.loss_T, r.kl, r.monotonicity, r.outlier_mass)
                for r in report.records])
    save_checkpoint(out / "checkpoint.json", models.generator, models.potential)
    gen = evaluator.samples(models)
    if np.all(np.isfinite(gen)):
        _write_csv(out / "samples.csv", ("x", "z", "t"),
                   zip(evaluator.x[:, 0].tolist(), evaluator.z[:, 0].tolist(), gen[:, 0].tolist()))
        _write_csv(out / "transport_map.csv", ("x", "t"), evaluator.transport_map(models).tolist())
        ex.write_histogram_csv(out / "density.csv",
                               {"generated": gen, "target": data, "reference": reference})

    final = report.final
    summary = {
        "status": "diverged" if report.diverged else "ok",
        "failure": report.failure,
        "epochs_completed": final.epoch if final else 0,
        **{k: cfg[k] for k in ("experiment", "variant", "tau", "lambda_r1", "psi1", "psi2", "seed")},
        "psi1_effective": tc.psi1.name,
        "psi2_effective": tc.psi2.name,
        **{m: _fmt_metric(getattr(final, m, None)) for m in METRICS},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def run_bound_check(instances: int, seed: int, out=None, instance_files=()) -> list[dict]:
    """Check the marginal-divergence bound on random (or given) discrete instances."""
    if instance_files:
        insts = [oracle.read_instance(p) for p in instance_files]
    else:
        rng = np.random.default_rng(seed)
        insts = [oracle.random_instance(rng) for _ in range(instances)]
    rows = []
    for i, inst in enumerate(insts):
        try:
            chk = oracle.verify_theorem_bound(inst["mu"], inst["nu"], inst["tau"], inst["psi1"], inst["psi2"])
            row = {"instance": i, "n": len(inst["mu"].weights), "m": len(inst["nu"].weights),
                   "tau": inst["tau"], "psi1": inst["psi1"].name, "psi2": inst["psi2"].name,
                   **chk.as_row(), "error": ""}
        except oracle.SolverError as exc:
            row = {"instance": i, "n": len(inst["mu"].weights), "m": len(inst["nu"].weights),
                   "tau": inst["tau"], "psi1": inst["psi1"].name, "psi2": inst["psi2"].name,
                   "lhs": math.nan, "rhs": math.nan, "holds": False, "slack": math.nan,
                   "budget": math.nan, "error": str(exc)}
        rows.append(row)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        keys = list(rows[0]) if rows else []
        _write_csv(out / "bounds.csv", keys, [[r[k] for k in keys] for r in rows])
    return rows


def run_experiment(cfg: dict, out, seeds=None, workers: int = 1) -> int:
    """Dispatch ``cfg['experiment']``; returns the process exit code."""
    exp = cfg["experiment"]
    if exp == "bound_check":
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config_text(cfg))
        rows = run_bound_check(cfg["instances"], cfg["seed"], out)
        held = sum(r["holds"] for r in rows)
        print(f"bound holds on {held}/{len(rows)} instances")
        return 0 if held == len(rows) else 1
    if exp in ABLATIONS:
        axis, values = ABLATIONS[exp]
        base = dict(cfg, experiment="matching")
        rows = sweep(base, axis, values, out, seeds=seeds, workers=workers)
        _print_rows(rows)
        return 0
    if seeds:
        rows = sweep(cfg, "seed", [str(s) for s in seeds], out, workers=workers)
        _print_rows(rows)
        return 1 if any(r["status"] != "ok" for r in rows) else 0
    summary = run_training(cfg, out)
    print(f"{summary['status']}: kl={summary['kl']:.4g} monotonicity={summary['monotonicity']:.4g} "
          f"outlier_mass={summary['outlier_mass']:.4g}")
    return 0 if summary["status"] == "ok" else 1


# ---------------------------------------------------------------- sweeps


def _apply_axis(cfg: dict, axis: str, value: str) -> dict:
    key = SWEEP_AXES.get(axis)
    if key is None:
        raise ConfigError(f"cannot sweep {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    cfg = dict(cfg)
    if key == "psi":
        parts = str(value).replace(",", ":").split(":")
        if len(parts) == 1:
            parts = parts * 2
        if len(parts) != 2:
            raise ConfigError(f"psi value {value!r} must be NAME or NAME1:NAME2")
        cfg["psi1"], cfg["psi2"] = (parse_value("psi1", p) for p in parts)
    else:
        cfg[key] = parse_value(key, value)
    train_config(cfg)
    return cfg


def _sweep_job(job):
    cfg, out = job
    try:
        return run_training(cfg, out)
    except Exception as exc:  # recorded as a failed row, the sweep continues
        return {"status": "failed", "failure": f"{type(exc).__name__}: {exc}",
                "epochs_completed": 0, **{m: math.nan for m in METRICS}}


def sweep(cfg: dict, axis: str, values, out, seeds=None, workers: int = 1) -> list[dict]:
    """One training run per value (times each seed); writes ``summary.csv``.

    A row is flagged ``degraded`` when it did not finish or its final kl
    exceeds ``degrade_factor`` times the kl of the reference row with the same
    seed: the row at the template's own value when swept, else the best row.
    """
    out = Path(out)
    values = [str(v) for v in values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    seeds = [None] if (not seeds or axis == "seed") else list(seeds)
    jobs, meta = [], []
    for value in values:
        vcfg = _apply_axis(cfg, axis, value)
        for s in seeds:
            rcfg = vcfg if s is None else dict(vcfg, seed=int(s))
            name = f"{axis}={value.replace(':', '-')}" + ("" if s is None else f"/seed={s}")
            jobs.append((rcfg, out / name))
            meta.append((value, rcfg["seed"], name))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text(cfg) + f"# sweep {axis} = {' '.join(values)}\n")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]

    rows = []
    for (value, seed, name), res in zip(meta, results):
        rows.append({"axis": axis, "value": value, "seed": seed, "run": name,
                     "status": res["status"], "epochs_completed": res["epochs_completed"],
                     **{m: res[m] for m in METRICS}, "failure": res["failure"]})
    _flag_degraded(rows, cfg, axis, values)
    keys = list(rows[0])
    _write_csv(out / "summary.csv", keys, [[r[k] for k in keys] for r in rows])
    return rows


def _axis_value_of(cfg, axis):
    key = SWEEP_AXES[axis]
    if key == "psi":
        return f"{cfg['psi1']}:{cfg['psi2']}"
    return cfg[key]


def _same_value(axis, a, b) -> bool:
    if SWEEP_AXES[axis] == "psi":
        norm = lambda v: ":".join(EntropySpec.parse(p).name for p in (str(v).split(":") * 2)[:2])
        return norm(a) == norm(b)
    return parse_value(SWEEP_AXES[axis], str(a)) == b


def _flag_degraded(rows, cfg, axis, values) -> None:
    own = _axis_value_of(cfg, axis)
    has_own = axis != "seed" and any(_same_value(axis, v, own) for v in values)
    for r in rows:
        peers = [p for p in rows if p["seed"] == r["seed"] and p["status"] == "ok" and math.isfinite(p["kl"])]
        if has_own:
            refs = [p["kl"] for p in peers if _same_value(axis, p["value"], own)]
        else:
            refs = [min(p["kl"] for p in peers)] if peers else []
        finished = r["status"] == "ok" and math.isfinite(r["kl"])
        r["degraded"] = (not finished) or bool(refs and r["kl"] > cfg["degrade_factor"] * refs[0])


def _print_rows(rows) -> None:
    for r in rows:
        flag = " degraded" if r.get("degraded") else ""
        print(f"{r['run']}: {r['status']}{flag} kl={r['kl']:.4g} monotonicity={r['monotonicity']:.4g} "
              f"outlier_mass={r['outlier_mass']:.4g}")


# ---------------------------------------------------------------- reports


REPORT_COLUMNS = ("run", "experiment", "variant", "tau", "lambda_r1", "psi1_effective", "psi2_effective",
                  "seed", "status", "epochs_completed") + METRICS


def _run_dirs(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if (p / "summary.json").is_file():
            found.append(p)
            continue
        nested = sorted(q.parent for q in p.rglob("summary.json")) if p.is_dir() else []
        if not nested:
            log.warning("skipping %s: no summary.json", p)
        found.extend(nested)
    return found


def _read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _label(d: Path, common: Path | None) -> str:
    d = Path(d).resolve()
    if common is not None and d != common:
        return str(d.relative_to(common))
    return d.name


def report(paths, out, figures: bool = True) -> list[dict]:
    """Comparison table (CSV and markdown) of final metrics, plus PNG figures."""
    out = Path(out)
    dirs = _run_dirs(paths)
    if not dirs:
        raise ConfigError("no completed runs found")
    out.mkdir(parents=True, exist_ok=True)
    common = Path(dirs[0]).resolve().parent if len(dirs) == 1 else _common_parent(dirs)
    rows, curves = [], {}
    for d in dirs:
        summary = json.loads((d / "summary.json").read_text())
        label = _label(d, common)
        row = {"run": label, **{k: summary.get(k, "") for k in REPORT_COLUMNS[1:]}}
        rows.append(row)
        if (d / "metrics.csv").is_file():
            curves[label] = _read_metrics(d / "metrics.csv")
        else:
            log.warning("%s: metrics.csv missing", d)

    _write_csv(out / "report.csv", REPORT_COLUMNS, [[r[k] for k in REPORT_COLUMNS] for r in rows])
    (out / "report.md").write_text(markdown_table(rows))
    if figures:
        _figures(dirs, rows, curves, out)
    return rows


def _common_parent(dirs) -> Path:
    parts = [Path(d).resolve().parts for d in dirs]
    n = 0
    while all(len(p) > n and p[n] == parts[0][n] for p in parts):
        n += 1
    return Path(*parts[0][:n]) if n else None


def markdown_table(rows) -> str:
    head = ["run", "variant", "tau", "lambda", "psi", "seed", "status", *METRICS]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        status = r["status"] if r["status"] == "ok" else f"**{str(r['status']).upper()}**"
        cells = [r["run"], r["variant"], r["tau"], r["lambda_r1"],
                 f"{r['psi1_effective']}/{r['psi2_effective']}", r["seed"], status]
        cells += [f"{float(r[m]):.4f}" if r[m] != "" else "" for m in METRICS]
        lines.append("| " + " | ".join(str(c) for c in cells) + " |")
    return "\n".join(lines) + "\n"


def _figures(dirs, rows, curves, out: Path) -> None:
    from . import plotting

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    for metric in METRICS:
        plotting.plot_metric_curves(fig_dir / f"{metric}.png", curves, metric)
    for d, row in zip(dirs, rows):
        stem = row["run"].replace("/", "_").replace("=", "")
        dens = d / "density.csv"
        if dens.is_file():
            with open(dens, newline="") as fh:
                table = list(csv.reader(fh))
            head, body = table[0], np.array(table[1:], dtype=float)
            cols = {h[len("density_"):]: body[:, i] for i, h in enumerate(head) if h.startswith("density_")}
            plotting.plot_density(fig_dir / f"density_{stem}.png", body[:, :2], cols, row["run"])
        else:
            log.warning("%s: density.csv missing, no density figure", d)
        tmap = d / "transport_map.csv"
        if tmap.is_file():
            xt = ex.load_samples_csv(tmap)
            plotting.plot_transport_map(fig_dir / f"transport_{stem}.png", xt[:, 0], xt[:, 1], row["run"])
        else:
            log.warning("%s: transport_map.csv missing, no map figure", d)


# ---------------------------------------------------------------- selftest


def selftest() -> int:
    """Fast property checks of the core numerics; prints one line per check."""
    from . import diffcore as dc
    from .divergence import conjugate_bruteforce, psi, psi_star
    from .trainer import initial_models, potential_loss

    checks = []

    def conj():
        ys = np.linspace(-3, 3, 61)
        return max(abs(psi_star(s, y) - conjugate_bruteforce(s, y))
                   for s in (EntropySpec.KL, EntropySpec.CHI2) for y in ys) < 1e-3

    def fenchel_young():
        rng = np.random.default_rng(0)
        x, y = rng.uniform(0, 4, 1000), rng.uniform(-4, 4, 1000)
        return all(np.all(x * y <= np.asarray(psi(s, x)) + np.asarray(psi_star(s, y)) + 1e-9)
                   for s in (EntropySpec.KL, EntropySpec.CHI2))

    def gradient():
        cfg = TrainConfig(arch=ArchSpec(hidden=6, blocks=1), batch_size=8)
        m = initial_models(cfg)
        rng = np.random.default_rng(1)
        pv = m.potential.replace(m.potential.flat + 0.1 * rng.standard_normal(m.potential.size))
        x, y, z = (rng.standard_normal((8, 1)) for _ in range(3))

        def value(p):
            return float(potential_loss(cfg, p, m.generator, x, y, z).value)

        from .model import bind
        tape = dc.Tape()
        b = bind(pv, tape)
        g = b.flat_grad(dc.backward(tape, potential_loss(cfg, b, m.generator, x, y, z, tape)))
        worst = 0.0
        for i in rng.choice(pv.size, 10, replace=False):
            e = np.zeros(pv.size)
            e[i] = 1e-5
            fd = (value(pv.replace(pv.flat + e)) - value(pv.replace(pv.flat - e))) / 2e-5
            worst = max(worst, abs(g[i] - fd) / max(1.0, abs(fd)))
        return worst < 1e-3

    def bound():
        return all(r["holds"] for r in run_bound_check(10, 0))

    for name, fn in (("conjugates", conj), ("fenchel-young", fenchel_young),
                     ("potential gradient", gradient), ("bound", bound)):
        try:
            ok = bool(fn())
        except Exception as exc:  # a crash is a failed check
            log.error("%s: %s", name, exc)
            ok = False
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        checks.append(ok)
    return 0 if all(checks) else 1


# ---------------------------------------------------------------- argument parsing


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", default="paper", choices=sorted(PRESETS))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--variant")
    p.add_argument("--tau")
    p.add_argument("--lambda", dest="lambda_r1")
    p.add_argument("--psi1")
    p.add_argument("--psi2")
    p.add_argument("--seed")
    p.add_argument("--epochs")
    p.add_argument("--hidden")
    p.add_argument("--lr", help="learning rate for both networks")
    p.add_argument("--eval-interval", dest="eval_interval")
    p.add_argument("--instances")
    p.add_argument("--seeds", nargs="+", type=int, help="repeat the run for each seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="output directory")


def _config_from_args(args, experiment: str | None = None) -> dict:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for key in ("variant", "tau", "lambda_r1", "psi1", "psi2", "seed", "epochs", "hidden",
                "eval_interval", "instances"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.lr is not None:
        overrides["lr_v"] = overrides["lr_T"] = args.lr
    if experiment is not None:
        overrides["experiment"] = experiment
    return resolve_config(args.preset, file_values, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uotm", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("experiment", choices=EXPERIMENTS)
    _add_config_args(p)

    p = sub.add_parser("sweep", help="one run per value of a config axis")
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--experiment", default=None, choices=("matching", "outlier"))
    _add_config_args(p)

    p = sub.add_parser("report", help="comparison table and figures for run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("bound-check", help="check the marginal-divergence bound on discrete instances")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instance", action="append", default=[], help="JSON instance file (repeatable)")
    p.add_argument("--out")

    sub.add_parser("selftest", help="fast property checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = _config_from_args(args, args.experiment)
            out = args.out or f"runs/{cfg['experiment']}"
            return run_experiment(cfg, out, seeds=args.seeds, workers=args.workers)
        if args.command == "sweep":
            cfg = _config_from_args(args, args.experiment)
            if cfg["experiment"] not in ("matching", "outlier"):
                raise ConfigError("sweeps run the matching or outlier experiment")
            out = args.out or f"runs/sweep_{args.axis}"
            rows = sweep(cfg, args.axis, args.values, out, seeds=args.seeds, workers=args.workers)
            _print_rows(rows)
            return 0
        if args.command == "report":
            rows = report(args.runs, args.out, figures=not args.no_figures)
            print(markdown_table(rows), end="")
            return 0
        if args.command == "bound-check":
            if args.instances < 1:
                raise ConfigError("--instances must be positive")
            rows = run_bound_check(args.instances, args.seed, args.out, args.instance)
            held = sum(r["holds"] for r in rows)
            print(f"bound holds on {held}/{len(rows)} instances")
            return 0 if held == len(rows) else 1
        if args.command == "selftest":
            return selftest()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
