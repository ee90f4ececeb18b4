import csv
import json

import pytest

from uotm import cli

TINY = ["--hidden", "8", "--epochs", "3", "--eval-interval", "1",
        "--set", "dataset_size=256", "--set", "batch_size=64", "--set", "eval_n=400", "--set", "blocks=1"]

ARTIFACTS = ("config.txt", "report.jsonl", "metrics.csv", "checkpoint.json", "samples.csv",
             "transport_map.csv", "density.csv", "summary.json")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_matching_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run", "matching", "--variant", "UOTM", "--tau", "0.1", "--seed", "0",
                     "--out", str(out)] + TINY) == 0
    for name in ARTIFACTS:
        assert (out / name).is_file(), name
    rows = _rows(out / "metrics.csv")
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert len((out / "report.jsonl").read_text().splitlines()) == 3
    assert json.loads((out / "summary.json").read_text())["status"] == "ok"


def test_run_is_byte_identical_and_regenerates_from_echo(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    args = ["run", "matching", "--seed", "3"] + TINY
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert cli.main(["run", "matching", "--config", str(a / "config.txt"), "--out", str(c)]) == 0
    for name in ARTIFACTS:
        ref = (a / name).read_bytes()
        assert (b / name).read_bytes() == ref, name
        assert (c / name).read_bytes() == ref, name


def test_outlier_run(tmp_path):
    assert cli.main(["run", "outlier", "--out", str(tmp_path)] + TINY) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["experiment"] == "outlier" and 0 <= summary["outlier_mass"] <= 1


def test_config_precedence(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\ntau = 0.05\nhidden = 16\n\nvariant = otm\n")
    cfg = cli.resolve_config("desk", cli.read_config_file(f), {"hidden": "8"})
    assert cfg["tau"] == 0.05 and cfg["hidden"] == 8 and cfg["variant"] == "OTM"
    assert cfg["epochs"] == cli.PRESETS["desk"]["epochs"]
    assert cli.resolve_config()["epochs"] == 2000


def test_paper_defaults():
    tc = cli.train_config(cli.resolve_config())
    assert (tc.batch_size, tc.lr_v, tc.lr_T, tc.epochs, tc.disc_steps) == (256, 1e-4, 1e-4, 2000, 5)
    assert (tc.arch.hidden, tc.arch.z_dim, tc.arch.activation) == (128, 1, "silu")


def test_config_echo_round_trip(tmp_path):
    cfg = cli.resolve_config("desk", None, {"psi1": "chi2", "lambda_r1": "0.1"})
    f = tmp_path / "echo.txt"
    f.write_text(cli.config_text(cfg))
    assert cli.resolve_config("paper", cli.read_config_file(f)) == cfg


@pytest.mark.parametrize("args", [
    ["run", "matching", "--tau", "-1"],
    ["run", "matching", "--set", "nope=1"],
    ["run", "matching", "--set", "epochs=abc"],
    ["run", "matching", "--psi1", "hellinger"],
    ["run", "matching", "--variant", "GAN"],
    ["sweep", "--axis", "psi", "--values", "KL:CHI2:KL"],
])
def test_config_errors_exit_2(args, tmp_path, capsys):
    assert cli.main(args + ["--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["run", "matching", "--config", str(tmp_path / "none.txt")]) == 2


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_divergence_exit_code_and_partial_artifacts(tmp_path):
    out = tmp_path / "div"
    code = cli.main(["run", "matching", "--out", str(out), "--set", "divergence_threshold=1e-9"] + TINY)
    assert code == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "diverged" and summary["failure"]
    assert (out / "report.jsonl").read_text().strip().splitlines()[-1].startswith('{"status": "diverged"')
    assert (out / "checkpoint.json").is_file()


def test_bound_check_run(tmp_path):
    assert cli.main(["run", "bound_check", "--instances", "12", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "bounds.csv")
    assert len(rows) == 12 and all(r["holds"] == "True" for r in rows)


def test_bound_check_subcommand_with_instance_file(tmp_path):
    import numpy as np
    from uotm import oracle
    inst = oracle.random_instance(np.random.default_rng(5))
    oracle.write_instance(tmp_path / "i.json", inst)
    assert cli.main(["bound-check", "--instance", str(tmp_path / "i.json"), "--out", str(tmp_path)]) == 0
    assert len(_rows(tmp_path / "bounds.csv")) == 1


def test_sweep_seeds_gives_distinct_streams(tmp_path):
    assert cli.main(["sweep", "--axis", "seed", "--values", "0", "1", "2", "--out", str(tmp_path)] + TINY) == 0
    rows = _rows(tmp_path / "summary.csv")
    assert [r["seed"] for r in rows] == ["0", "1", "2"]
    assert len({r["kl"] for r in rows}) == 3
    samples = {(tmp_path / f"seed={s}" / "samples.csv").read_bytes() for s in range(3)}
    assert len(samples) == 3


def test_sweep_psi_and_failed_rows_continue(tmp_path):
    rows = cli.sweep(cli.resolve_config("paper", None, dict(zip(
        ["hidden", "epochs", "eval_interval", "dataset_size", "batch_size", "eval_n", "blocks"],
        ["8", "2", "1", "256", "64", "400", "1"]))), "psi", ["KL", "CHI2:KL"], tmp_path)
    assert [(r["value"], r["status"]) for r in rows] == [("KL", "ok"), ("CHI2:KL", "ok")]
    cfg = json.loads((tmp_path / "psi=CHI2-KL" / "summary.json").read_text())
    assert (cfg["psi1"], cfg["psi2"]) == ("CHI2", "KL")


def test_sweep_records_failures(tmp_path, monkeypatch):
    def boom(cfg, out):
        if cfg["tau"] == 0.5:
            raise RuntimeError("synthetic failure")
        return real(cfg, out)

    real = cli.run_training
    monkeypatch.setattr(cli, "run_training", boom)
    base = cli.resolve_config("paper", None, {"hidden": "8", "epochs": "1", "dataset_size": "256",
                                               "batch_size": "64", "eval_n": "400", "blocks": "1"})
    rows = cli.sweep(base, "tau", ["0.5", "0.1"], tmp_path)
    assert rows[0]["status"] == "failed" and "synthetic" in rows[0]["failure"]
    assert rows[0]["degraded"] and rows[1]["status"] == "ok"


def test_degraded_flag_uses_reference_row():
    cfg = dict(cli.DEFAULTS)
    rows = [{"value": v, "seed": 0, "status": "ok", "kl": kl} for v, kl in (("0", 0.9), ("0.01", 0.1), ("0.1", 0.4))]
    cli._flag_degraded(rows, cfg, "lambda", ["0", "0.01", "0.1"])
    assert [r["degraded"] for r in rows] == [True, False, False]


def test_report_tables_and_figures(tmp_path):
    runs = tmp_path / "runs"
    assert cli.main(["run", "matching", "--variant", "UOTM", "--out", str(runs / "uotm")] + TINY) == 0
    assert cli.main(["run", "matching", "--variant", "OTM", "--out", str(runs / "otm")] + TINY) == 0
    assert cli.main(["run", "matching", "--out", str(runs / "bad"),
                     "--set", "divergence_threshold=1e-9"] + TINY) == 1
    out = tmp_path / "rep"
    assert cli.main(["report", str(runs), str(tmp_path / "nothing"), "--out", str(out)]) == 0
    rows = _rows(out / "report.csv")
    assert {r["run"] for r in rows} == {"bad", "otm", "uotm"}
    assert {r["variant"] for r in rows} == {"UOTM", "OTM"}
    md = (out / "report.md").read_text()
    assert "**DIVERGED**" in md and md.count("\n") == 5
    figs = {p.name for p in (out / "figures").iterdir()}
    assert {"kl.png", "monotonicity.png", "density_uotm.png", "transport_otm.png"} <= figs
    assert (out / "figures" / "kl.png").read_bytes()[:4] == b"\x89PNG"


def test_report_single_run(tmp_path):
    assert cli.main(["run", "matching", "--out", str(tmp_path / "one")] + TINY) == 0
    rows = cli.report([tmp_path / "one"], tmp_path / "rep", figures=False)
    assert len(rows) == 1 and rows[0]["run"] == "one"


def test_report_without_runs_is_config_error(tmp_path):
    assert cli.main(["report", str(tmp_path), "--out", str(tmp_path / "r")]) == 2


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out


def test_parallel_sweep_matches_serial(tmp_path):
    base = cli.resolve_config("paper", None, {"hidden": "8", "epochs": "2", "dataset_size": "256",
                                               "batch_size": "64", "eval_n": "400", "blocks": "1"})
    serial = cli.sweep(base, "seed", ["0", "1"], tmp_path / "s", workers=1)
    parallel = cli.sweep(base, "seed", ["0", "1"], tmp_path / "p", workers=2)
    assert [r["kl"] for r in serial] == [r["kl"] for r in parallel]
    assert (tmp_path / "s" / "seed=1" / "metrics.csv").read_bytes() == \
        (tmp_path / "p" / "seed=1" / "metrics.csv").read_bytes()
