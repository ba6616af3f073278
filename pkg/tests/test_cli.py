import csv
import json
import os
from pathlib import Path

import pytest

from mmcert.cli import EXIT_DIVERGED, EXIT_OK, EXIT_UNSOUND, EXIT_USAGE, gap_curve, main

TINY = {
    "data": {"preset": "skewed", "n_train": 96, "n_test": 40},
    "model": {"hidden": [6], "out_dim": 5},
    "train": {"epochs_step1": 3, "epochs_step2": 2, "batch_size": 32,
              "at": {"family": "pgd_l2", "epsilon": 1.0, "steps": 2}},
    "attack": {"grid": [0.1, 0.5], "steps": 3},
    "oracle": {"n_samples": 8, "steps": 10, "restarts": 1, "tol": 1e-3},
}


def _write_cfg(path, raw):
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture
def run(tmp_path):
    cfg = _write_cfg(tmp_path / "cfg.json", TINY)
    out = tmp_path / "run"

    def call(*args):
        return main([args[0], "--config", cfg, "--out", str(out), *args[1:]])

    call.out = out
    return call


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*"))
            if p.is_file()}


def test_gen_writes_files_and_is_deterministic(run):
    assert run("gen") == EXIT_OK
    first = _snapshot(run.out)
    assert {"data/train.csv", "data/test.csv", "data/manifest.json", "config.json"} <= set(first)
    manifest = json.loads((run.out / "data" / "manifest.json").read_text())
    assert manifest["preset"] == "skewed" and manifest["n_train"] == 96
    echoed = json.loads((run.out / "config.json").read_text())
    assert echoed["train"]["seed"] == 2 and echoed["oracle"]["seed"] == 4
    assert run("gen") == EXIT_OK
    assert _snapshot(run.out) == first


def test_gen_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--out", str(blocker / "sub")]) == EXIT_USAGE
    assert str(blocker) in capsys.readouterr().err


def test_unknown_strategy(run):
    run("gen")
    assert run("train", "--strategy", "mixup") == EXIT_USAGE


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as err:
        main(["gen", "--seed", "x"])
    assert err.value.code == EXIT_USAGE


def test_bad_config(tmp_path):
    cfg = _write_cfg(tmp_path / "c.json", {"attack": {"grid": [0.5, 0.1]}})
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_USAGE
    cfg = _write_cfg(tmp_path / "d.json", {"bogus": {}})
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_USAGE


def test_train_before_gen(run):
    assert run("train", "--strategy", "jt") == EXIT_USAGE


def test_divergence_exit_code(tmp_path):
    raw = json.loads(json.dumps(TINY))
    raw["train"].update(learning_rate=1e6, epochs_step1=30, weight_decay=0.0)
    cfg = _write_cfg(tmp_path / "c.json", raw)
    out = str(tmp_path / "r")
    assert main(["gen", "--config", cfg, "--out", out]) == EXIT_OK
    assert main(["train", "--config", cfg, "--out", out, "--strategy", "jt"]) == EXIT_DIVERGED


@pytest.mark.parametrize("strategy", ["jt", "ojt", "crmt", "crmt-at"])
def test_train_outputs(run, strategy):
    run("gen")
    assert run("train", "--strategy", strategy) == EXIT_OK
    rows = list(csv.reader((run.out / "traces" / f"{strategy}.csv").open()))
    epochs = 3 if strategy in ("jt", "ojt") else 5
    assert rows[0][0] == "epoch" and len(rows) == 1 + epochs
    assert (run.out / "models" / f"{strategy}.json").exists()


def test_certify_attack_oracle_report(run):
    run("gen")
    for s in ("jt", "crmt"):
        assert run("train", "--strategy", s) == EXIT_OK
        assert run("certify", "--strategy", s) == EXIT_OK
        assert run("attack", "--strategy", s) == EXIT_OK
        assert run("oracle", "--strategy", s) == EXIT_OK
    summary = json.loads((run.out / "certify" / "crmt" / "summary.json").read_text())
    assert summary["head"] == "orthogonal" and summary["bound"] == "orthogonal"
    jt = json.loads((run.out / "certify" / "jt" / "summary.json").read_text())
    assert jt["head"] == "standard"
    certs = list(csv.DictReader((run.out / "certify" / "jt" / "certificates.csv").open()))
    assert len(certs) == 40
    assert jt["n_misclassified"] == sum(c["valid"] == "0" for c in certs)
    ratio = list(csv.reader((run.out / "certify" / "jt" / "eta_ratio.csv").open()))
    assert len(ratio) == 4 and all(len(r) == 4 for r in ratio)

    sweep = list(csv.DictReader((run.out / "attack" / "jt" / "sweep.csv").open()))
    assert list(sweep[0]) == ["epsilon", "family", "target", "accuracy", "n_samples"]
    clean = {r["accuracy"] for r in sweep if float(r["epsilon"]) == 0.0 and r["family"] != "missing"}
    assert clean == {repr(jt["clean_acc"])}
    assert {r["target"] for r in sweep} >= {"m1+m2", "m1", "m2"}
    assert any(r["family"] == "missing" for r in sweep)
    for target in ("m1+m2", "m1", "m2"):
        accs = [float(r["accuracy"]) for r in sweep if r["family"] == "pgd_l2" and r["target"] == target]
        assert all(b <= a + 0.01 for a, b in zip(accs, accs[1:]))

    orc = json.loads((run.out / "oracle" / "crmt" / "report.json").read_text())
    assert orc["violation_count"] == 0
    assert "slack_quantiles" in orc["kinds"]["multimodal"]
    assert set(orc["kinds"]) == {"multimodal", "uni_m1", "uni_m2"}

    assert run("report") == EXIT_OK
    gap = list(csv.reader((run.out / "report" / "gap_jt.csv").open()))
    assert gap[0] == ["epsilon", "acc_m1", "acc_m2", "gap"] and len(gap) == 1 + 3
    before = _snapshot(run.out / "report")
    assert run("report") == EXIT_OK
    assert _snapshot(run.out / "report") == before


def test_injected_fault_exits_three(run):
    run("gen")
    run("train", "--strategy", "jt")
    assert run("oracle", "--strategy", "jt", "--tau-scale", "0.05") == EXIT_UNSOUND
    orc = json.loads((run.out / "oracle" / "jt" / "report.json").read_text())
    assert orc["violation_count"] >= 1 and orc["violations"]


def test_report_lists_missing_inputs(run, capsys):
    run("gen")
    run("train", "--strategy", "jt")
    assert run("report") == EXIT_USAGE
    err = capsys.readouterr().err
    assert "certify" in err and "sweep.csv" in err


def test_checkpoint_dim_mismatch(run, tmp_path):
    run("gen")
    run("train", "--strategy", "jt")
    raw = json.loads(json.dumps(TINY))
    raw["data"]["dims"] = [6, 6]
    cfg = _write_cfg(tmp_path / "other.json", raw)
    other = tmp_path / "other"
    assert main(["gen", "--config", cfg, "--out", str(other)]) == EXIT_OK
    ckpt = str(run.out / "models" / "jt")
    assert main(["certify", "--config", cfg, "--out", str(other), "--strategy", "jt",
                 "--checkpoint", ckpt]) == EXIT_USAGE


def test_jobs_do_not_change_outputs(run):
    run("gen")
    run("train", "--strategy", "jt")
    run("attack", "--strategy", "jt")
    run("certify", "--strategy", "jt")
    one = _snapshot(run.out / "attack"), _snapshot(run.out / "certify")
    run("attack", "--strategy", "jt", "--jobs", "2")
    run("certify", "--strategy", "jt", "--jobs", "2")
    assert (_snapshot(run.out / "attack"), _snapshot(run.out / "certify")) == one


def test_gap_curve_schema():
    rows = [{"family": "pgd_l2", "target": t, "epsilon": e, "accuracy": a}
            for t, e, a in [("m1", "0.5", "0.2"), ("m2", "0.5", "0.7"), ("m1+m2", "0.5", "0.1")]]
    assert gap_curve(rows) == [(0.5, 0.2, 0.7, 0.2 - 0.7)]
