import csv
import math

import pytest

from biospeech.cli import main

TRAIN_CFG = "model.conv_channels=16\nmodel.groups=4\nmodel.gru_hidden=8\nmax_epochs=2\n"


def snapshot(root, skip=("train_log.csv",)):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def log_without_wall_ms(path):
    with open(path, newline="") as fh:
        return [(r["epoch"], r["split"], r["loss"], r["lr"]) for r in csv.DictReader(fh)]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "train.cfg").write_text(TRAIN_CFG)
    assert main(["synth", "--sentences", "20", "--seed", "7", "--out-dir", str(root / "data")]) == 0
    assert main(["train", "--data-dir", str(root / "data"), "--out-dir", str(root / "model"), "--mode", "overt",
                 "--config", str(root / "train.cfg")]) == 0
    assert main(["eval", "--data-dir", str(root / "data"), "--model-dir", str(root / "model"),
                 "--out-dir", str(root / "eval")]) == 0
    return root


def test_end_to_end_outputs(workspace):
    split = (workspace / "data" / "split.txt").read_text().split("\n")
    n_test = sum(1 for line in split if line.startswith("test "))
    assert n_test == 4
    with open(workspace / "eval" / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == n_test + 1 and rows[-1]["sentence_id"] == "mean"
    for r in rows:
        assert all(math.isfinite(float(r[k])) for k in ("accuracy", "rmse", "mcd", "f1", "per"))
    for name in ("checkpoint.bin", "model_config.txt", "normalizer.bin", "train_log.csv", "run.log",
                 "resolved_config.txt"):
        assert (workspace / "model" / name).exists()
    for name in ("confusion.csv", "confusion.svg", "mean_features.csv", "resolved_config.txt"):
        assert (workspace / "eval" / name).exists()
    assert (workspace / "model" / "run.log").read_text().startswith("loss=overt\n")


def test_reruns_are_bit_exact(workspace):
    root = workspace
    before_data, before_model, before_eval = (snapshot(root / d) for d in ("data", "model", "eval"))
    before_log = log_without_wall_ms(root / "model" / "train_log.csv")
    assert main(["synth", "--sentences", "20", "--seed", "7", "--out-dir", str(root / "data")]) == 0
    assert main(["train", "--data-dir", str(root / "data"), "--out-dir", str(root / "model"), "--mode", "overt",
                 "--config", str(root / "train.cfg")]) == 0
    assert main(["eval", "--data-dir", str(root / "data"), "--model-dir", str(root / "model"),
                 "--out-dir", str(root / "eval")]) == 0
    assert snapshot(root / "data") == before_data
    assert snapshot(root / "model") == before_model
    assert snapshot(root / "eval") == before_eval
    assert log_without_wall_ms(root / "model" / "train_log.csv") == before_log


def test_imagined_mode_selects_silent_loss(workspace, capsys):
    out = workspace / "model_imagined"
    assert main(["train", "--data-dir", str(workspace / "data"), "--out-dir", str(out), "--mode", "imagined",
                 "--config", str(workspace / "train.cfg"), "--epochs", "1"]) == 0
    assert "loss=silent mode=imagined" in capsys.readouterr().out
    assert (out / "run.log").read_text().splitlines()[0] == "loss=silent"


def test_analyze_outputs(workspace):
    out = workspace / "analysis"
    metrics = str(workspace / "eval" / "metrics.csv")
    assert main(["analyze", "--data-dir", str(workspace / "data"), "--out-dir", str(out), "--metrics", metrics]) == 0
    assert (out / "w_scores.csv").exists() and (out / "pcc.csv").exists()


def test_missing_path_exits_1(tmp_path, capsys):
    assert main(["train", "--data-dir", str(tmp_path / "nope"), "--out-dir", str(tmp_path / "o")]) == 1
    assert "missing file" in capsys.readouterr().err


def test_unknown_config_key_exits_2(workspace, tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("learning_rate=0.1\n")
    code = main(["train", "--data-dir", str(workspace / "data"), "--out-dir", str(tmp_path / "o"),
                 "--config", str(tmp_path / "bad.cfg")])
    assert code == 2
    assert "learning_rate" in capsys.readouterr().err


def test_out_dir_must_differ_from_input(workspace):
    assert main(["preprocess", "--data-dir", str(workspace / "data"), "--out-dir", str(workspace / "data")]) == 2


def test_preprocess_writes_epochs(workspace):
    out = workspace / "pre"
    assert main(["preprocess", "--data-dir", str(workspace / "data"), "--out-dir", str(out), "--band", "alpha"]) == 0
    assert len(list((out / "epochs").glob("*.hdr"))) == 20
