import csv
import json
import math

import numpy as np
import pytest

from ckbsim.cli import ENV_DATA, ENV_THREADS, build_parser, main, parse_number_list, parse_radius
from ckbsim.datastore import read_dataset
from ckbsim.errors import ConfigError


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-dataset", "--samples", "24", "--preset", "small", "--resolution", "32",
                 "--seed", "3", "--out", str(root / "ds")]) == 0
    assert main(["train-ckb", "--data", str(root / "ds"), "--epochs", "2",
                 "--out", str(root / "ckb.ckpt")]) == 0
    return root


def test_number_lists():
    assert parse_number_list("-5:25:5") == [-5, 0, 5, 10, 15, 20, 25]
    assert parse_number_list("0.001,0.01,0.1") == [0.001, 0.01, 0.1]
    assert parse_number_list("10,inf")[1] == math.inf
    assert parse_number_list("4,28", int) == [4, 28]
    for bad in ("1:2", "5:0:1", "a,b", ""):
        with pytest.raises(ConfigError):
            parse_number_list(bad)
    assert parse_radius("adaptive") == "adaptive" and parse_radius("60") == 60
    with pytest.raises(ConfigError):
        parse_radius("0")


def test_parser_has_every_command():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"gen-dataset", "train-ckb", "eval-ckb", "train-jscc", "eval-jscc",
                        "report"}


def test_gen_dataset(run):
    samples, manifest = read_dataset(run / "ds")
    assert manifest.sample_count == 24 == len(samples)
    summary = json.loads((run / "ds" / "summary.json").read_text())
    assert summary["results"]["sample_count"] == 24
    assert len(_rows(run / "ds" / "samples.csv")) == 24


def test_train_ckb_outputs(run):
    history = _rows(run / "ckb.ckpt.history.csv")
    assert [r["epoch"] for r in history] == ["1", "2"]
    assert (run / "ckb.ckpt.store").exists()
    summary = json.loads((run / "ckb.ckpt.summary.json").read_text())
    assert summary["results"]["store_entries"] == 24
    assert main(["eval-ckb", "--data", str(run / "ds"), "--model", str(run / "ckb.ckpt"),
                 "--out", str(run / "eval.csv")]) == 0
    row = _rows(run / "eval.csv")[0]
    assert math.isclose(float(row["mse"]), summary["results"]["heldout_mse"], rel_tol=1e-12)


def test_roi_sweep_rows(run):
    out = run / "roi.csv"
    assert main(["eval-ckb", "--data", str(run / "ds"), "--sweep", "roi",
                 "--radii", "20,60,100,adaptive", "--epochs", "1", "--out", str(out)]) == 0
    assert [r["radius"] for r in _rows(out)] == ["20", "60", "100", "adaptive"]


def test_jscc_grid(run):
    models = run / "models"
    for mode in ("ckb", "true_csi", "no_knowledge"):
        assert main(["train-jscc", "--data", str(run / "ds"), "--mode", mode, "--steps", "2",
                     "--batch-size", "4", "--store", str(run / "ckb.ckpt.store"),
                     "--model-dir", str(models)]) == 0
    out = run / "snr.csv"
    assert main(["eval-jscc", "--data", str(run / "ds"), "--sweep", "snr", "--snrs", "-5:25:5",
                 "--modes", "ckb,true_csi,no_knowledge", "--store", str(run / "ckb.ckpt.store"),
                 "--model-dir", str(models), "--pairs", "1", "--out", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) == 21
    assert {(r["snr_db"], r["mode"]) for r in rows} == {
        (f"{float(s)!r}", m) for s in range(-5, 30, 5) for m in ("ckb", "true_csi", "no_knowledge")}
    eem = run / "eem.csv"
    assert main(["eval-jscc", "--data", str(run / "ds"), "--sweep", "eem", "--snrs", "10",
                 "--model-dir", str(models), "--pairs", "1", "--out", str(eem)]) == 0
    rows = _rows(eem)
    assert [r["eem"] for r in rows] == ["0.001", "0.01", "0.1"]
    assert len({r["ssim"] for r in rows}) == 3  # the perturbation reaches the model


def test_report(run):
    out = run / "sweeps"
    out.mkdir()
    assert main(["eval-ckb", "--data", str(run / "ds"), "--sweep", "fusion", "--epochs", "1",
                 "--fusions", "attention,linear", "--out", str(out / "fusion.csv")]) == 0
    assert main(["report", "--run", str(out)]) == 0
    checks = {r["check"] for r in _rows(out / "report.csv")}
    assert "fusion_attention_beats_linear" in checks


def test_exit_codes(run, tmp_path, capsys):
    assert main(["train-ckb", "--data", str(tmp_path / "none"), "--out", "x"]) == 3
    assert main(["train-ckb", "--bogus"]) == 2
    assert main(["train-jscc", "--data", str(run / "ds"), "--mode", "ckb", "--steps", "1",
                 "--model-dir", str(tmp_path)]) == 2
    assert main(["report", "--run", str(tmp_path)]) == 3
    assert main(["gen-dataset", "--samples", "4", "--threads", "0", "--out", "x"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_reports_step(run, tmp_path, capsys):
    code = main(["train-ckb", "--data", str(run / "ds"), "--lr", "1e30", "--epochs", "30",
                 "--patience", "100", "--out", str(tmp_path / "x.ckpt")])
    assert code == 4
    assert "step" in capsys.readouterr().err


def test_env_overrides(run, tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_DATA, str(run / "ds"))
    monkeypatch.setenv(ENV_THREADS, "1")
    assert main(["train-ckb", "--epochs", "1", "--out", str(tmp_path / "c.ckpt")]) == 0
    args = build_parser().parse_args(["train-ckb", "--out", "x"])
    assert args.threads == 1
    monkeypatch.setenv(ENV_DATA, str(tmp_path / "fresh"))
    assert main(["gen-dataset", "--samples", "3", "--preset", "small", "--resolution",
                 "16"]) == 0
    assert (tmp_path / "fresh" / "manifest.json").exists()


def test_replay_is_byte_identical(run, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"r{i}.csv"
        assert main(["eval-ckb", "--data", str(run / "ds"), "--sweep", "fusion", "--epochs", "2",
                     "--fusions", "attention,linear", "--float64", "--threads", "1",
                     "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert np.isfinite([float(r["mse"]) for r in _rows(tmp_path / "r0.csv")]).all()
