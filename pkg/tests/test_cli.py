"""End-to-end CLI behaviour through real subprocesses."""

import csv
import hashlib
import json
import os
import subprocess
import sys

import pytest

from miadip.config import RunConfig, config_from_dict, config_from_toml

DEMO = os.path.join(os.path.dirname(__file__), "..", "configs", "demo.toml")


def run_cli(*argv, cwd=None):
    return subprocess.run(
        [sys.executable, "-m", "miadip.cli", *argv],
        capture_output=True, text=True, cwd=cwd,
    )


@pytest.fixture(scope="module")
def demo_sweep(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("sweep"))
    proc = run_cli("sweep", "--config", DEMO, "--out", out)
    assert proc.returncode == 0, proc.stderr
    with open(os.path.join(out, "results.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return out, rows, proc


def test_sweep_demo_grid(demo_sweep):
    out, rows, proc = demo_sweep
    assert "1 rows ->" in proc.stdout
    assert len(rows) == 1
    row = rows[0]
    assert row["cell_id"] == "tl-m0.5-n32-s0-seed0"
    # frozen regression anchors for the shipped demo config
    assert row["asr_bim"] == "0.609375"
    assert row["asr_hsj"] == "0.59375"
    assert row["asr_entropy"] == "0.546875"
    assert row["acc"] == "0.9609375"
    assert row["gap"] == "0.0390625"
    assert os.path.exists(os.path.join(out, "summary.csv"))
    for name in ("asr_vs_mfrac.svg", "acc_vs_mfrac.svg"):
        assert os.path.exists(os.path.join(out, "plots", name)), name
    report = os.path.join(out, "cells", row["cell_id"], "report.json")
    assert os.path.exists(report)


def test_print_config_defaults_roundtrip(tmp_path):
    proc = run_cli("print-config")
    assert proc.returncode == 0
    path = tmp_path / "echo.toml"
    path.write_text(proc.stdout)
    assert config_from_toml(str(path)).to_dict() == RunConfig().to_dict()


def test_print_config_applies_file_and_overrides(tmp_path):
    proc = run_cli("print-config", "--config", DEMO, "--seed", "7")
    assert proc.returncode == 0
    path = tmp_path / "echo.toml"
    path.write_text(proc.stdout)
    cfg = config_from_toml(str(path))
    assert cfg.transfer.epochs == 80
    assert cfg.task.dim == 64
    assert cfg.run.seed == 7


def test_report_renders_table_and_plots(demo_sweep, tmp_path):
    out, rows, _ = demo_sweep
    plot_dir = str(tmp_path / "plots")
    proc = run_cli("report", os.path.join(out, "results.csv"),
                   "--out", plot_dir)
    assert proc.returncode == 0, proc.stderr
    lines = proc.stdout.splitlines()
    assert lines[0].startswith("family")
    assert any("tl-m0.5-n32-s0" in ln for ln in lines[1:])
    assert os.path.exists(os.path.join(plot_dir, "asr_vs_mfrac.svg"))


def test_report_with_no_rows_exits_3(tmp_path):
    empty = tmp_path / "results.csv"
    empty.write_text(
        "cell_id,variant,M_frac,N,sigma,seed,asr_bim,asr_hsj,asr_entropy,"
        "acc,train_acc,gap,queries_total,wall_ms\n")
    proc = run_cli("report", str(empty))
    assert proc.returncode == 3
    assert "no rows" in proc.stderr


def test_missing_config_exits_2():
    proc = run_cli("sweep", "--config", "/nonexistent/miadip.toml")
    assert proc.returncode == 2
    assert "config error" in proc.stderr


def test_invalid_toml_exits_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[transfer\nvariant =")
    proc = run_cli("print-config", "--config", str(bad))
    assert proc.returncode == 2


def test_unknown_key_exits_2_with_suggestion(tmp_path):
    typo = tmp_path / "typo.toml"
    typo.write_text('[transfer]\nvaraint = "tl"\n')
    proc = run_cli("print-config", "--config", str(typo))
    assert proc.returncode == 2
    assert "did you mean 'variant'" in proc.stderr


def test_bad_variant_flag_is_a_usage_error():
    proc = run_cli("transfer", "--variant", "bogus")
    assert proc.returncode == 2
    assert "invalid choice" in proc.stderr


def md5(path):
    with open(path, "rb") as fh:
        return hashlib.md5(fh.read()).hexdigest()


def test_checkpoint_pipeline_is_deterministic(demo_sweep, tmp_path):
    out, rows, _ = demo_sweep
    d = str(tmp_path)
    proc = run_cli("train-source", "--config", DEMO, "--out", d)
    assert proc.returncode == 0, proc.stderr
    src = os.path.join(d, "source-seed0.npz")
    assert os.path.exists(src)

    t1 = run_cli("transfer", src, "--config", DEMO, "--out", d)
    assert t1.returncode == 0, t1.stderr
    target = os.path.join(d, "target-tl-m2-seed0.npz")
    assert os.path.exists(target)
    first = md5(target)
    t2 = run_cli("transfer", src, "--config", DEMO, "--out", d)
    assert t2.returncode == 0
    assert md5(target) == first  # same bytes on a rerun

    # attacking the saved checkpoint reproduces the sweep's numbers
    a = run_cli("attack", target, "--config", DEMO, "--out", d)
    assert a.returncode == 0, a.stderr
    report_path = os.path.join(d, "cells", rows[0]["cell_id"], "report.json")
    with open(report_path) as fh:
        report = json.load(fh)
    for name in ("bim", "hsj", "entropy"):
        assert repr(report["attacks"][name]["asr"]) == rows[0][f"asr_{name}"]
    assert repr(report["acc_deployed"]) == rows[0]["acc"]


def test_diverging_run_exits_3(tmp_path):
    cfg = config_from_dict({
        "task": {"dim": 64, "source_classes": 8, "target_classes": 4,
                 "source_n": 4000, "target_train_n": 32, "target_eval_n": 256},
        "arch": {"hidden": [32, 32, 16]},
        "source": {"epochs": 2},
        "transfer": {"variant": "ntl", "epochs": 2, "lr": 1e200},
        "attack": {"bim": {"max_iters": 10},
                   "hsj": {"grad_probes": 4, "max_rounds": 2,
                           "max_queries": 100}},
    })
    path = tmp_path / "diverge.toml"
    path.write_text(cfg.to_toml())
    proc = run_cli("attack", "--config", str(path), "--out", str(tmp_path))
    assert proc.returncode == 3
    assert "[train]" in proc.stderr
