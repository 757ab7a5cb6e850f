import csv
import json
import os

import pytest

from groupdiff.cli import dataset_hash, main

TINY_NET = ["--channels", "8", "--blocks-per-level", "1"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), "--n-train", "40", "--n-val", "40", "--n-test", "12"]) == 0
    return str(out)


@pytest.fixture(scope="module")
def ckpt(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(["train", "--data", data_dir, "--out", str(out), "--epochs", "2", "--warmup-epochs", "1",
                 "--batch-size", "16", "--probe-samples", "16", "--keep-last", "1", *TINY_NET])
    assert code == 0
    return str(out / "ckpt_0002.gdkw")


def test_gen_data_is_reproducible(data_dir, tmp_path):
    again = tmp_path / "again"
    manifest = os.path.join(data_dir, "manifest.json")
    assert main(["gen-data", "--config", manifest, "--out", str(again)]) == 0
    assert dataset_hash(str(again)) == dataset_hash(data_dir)
    man = json.load(open(manifest))
    assert man["dataset_hash"] == dataset_hash(data_dir) and man["command"] == "gen-data"


def test_gen_data_seed_changes_hash(data_dir, tmp_path):
    other = tmp_path / "other"
    assert main(["gen-data", "--out", str(other), "--n-train", "40", "--n-val", "40", "--n-test", "12",
                 "--seed", "1"]) == 0
    assert dataset_hash(str(other)) != dataset_hash(data_dir)


def test_stats(data_dir, tmp_path):
    assert main(["stats", "--data", data_dir, "--out", str(tmp_path), "--scheme", "baseline"]) == 0
    assert json.load(open(tmp_path / "stats.json"))["scheme"] == "baseline"


def test_train_outputs(ckpt):
    run = os.path.dirname(ckpt)
    man = json.load(open(os.path.join(run, "manifest.json")))
    assert man["config"]["channels"] == 8 and man["checkpoints"] == ["ckpt_0002.gdkw"]
    assert os.path.exists(os.path.join(run, "grad_probe.csv"))


def test_sample_and_eval(ckpt, data_dir, tmp_path):
    assert main(["sample", "--ckpt", ckpt, "--out", str(tmp_path / "s"), "--count", "6", "--length", "32"]) == 0
    assert json.load(open(tmp_path / "s" / "manifest.json"))["nfe"] == 31
    assert main(["eval", "--ckpt", ckpt, "--data", data_dir, "--out", str(tmp_path / "e"), "--count", "40",
                 "--runs", "2", "--n-pairs", "5"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "e" / "metrics.csv")))
    assert len(rows) == 2
    best = json.load(open(tmp_path / "e" / "metrics.json"))
    assert best["frechet"] == min(float(r["frechet"]) for r in rows)


def test_probe_grads(ckpt, data_dir, tmp_path):
    assert main(["probe-grads", "--ckpt", ckpt, "--data", data_dir, "--out", str(tmp_path), "--t", "0.1,1",
                 "--samples", "16", "--batch", "8"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "grad_probe.csv")))
    assert len(rows) == 2 * 5


def test_nll_and_rte_with_model(ckpt, data_dir, tmp_path):
    assert main(["nll", "--ckpt", ckpt, "--data", data_dir, "--out", str(tmp_path / "n"), "--count", "2",
                 "--nfe", "8", "--probes", "1"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "n" / "nll.csv")))
    assert len(rows) == 2 and rows[0]["nll_unnorm"] != ""
    assert main(["rte", "--ckpt", ckpt, "--data", data_dir, "--out", str(tmp_path / "r"), "--count", "2",
                 "--fwd-nfe", "8", "--bwd-nfe", "4,8"]) == 0


def test_oracle_rte(tmp_path):
    assert main(["rte", "--oracle", "gaussian", "--out", str(tmp_path), "--count", "16", "--oracle-dim", "8"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rte.csv")))
    assert [int(r["nfe_bwd"]) for r in rows] == [16, 32, 64, 128]
    vals = [float(r["value"]) for r in rows]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert len(list(csv.DictReader(open(tmp_path / "rte_samples.csv")))) == 4 * 16


def test_oracle_nll(tmp_path):
    assert main(["nll", "--oracle", "gaussian", "--out", str(tmp_path), "--count", "4", "--oracle-dim", "8",
                 "--nfe", "32", "--probes", "2"]) == 0


def test_ablate_two_modes(data_dir, tmp_path):
    code = main(["ablate", "--data", data_dir, "--out", str(tmp_path), "--modes", "Baseline,Final", "--epochs", "1",
                 "--warmup-epochs", "0", "--batch-size", "16", "--probe-samples", "16", "--count", "40",
                 "--runs", "1", "--n-pairs", "5", "--keep-last", "1", *TINY_NET])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert [r["mode"] for r in rows] == ["Baseline", "Final"]
    assert set(rows[0]) == {"mode", "frechet", "diversity", "foot_skating", "limb_sigma"}


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["train", "--epochs", "x"],
    ["train", "--out", "/tmp/x"],
    ["sample", "--out", "/tmp/x"],
    ["gen-data", "--bogus"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_runtime_error_exits_2(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key_is_usage_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"not_a_key": 1}))
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == 1


def test_help_exits_0():
    assert main(["--help"]) == 0
