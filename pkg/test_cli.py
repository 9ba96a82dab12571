"""
End-to-end tests for the visionguard command line on a tiny synthetic run.
"""
import csv
import json
import subprocess
import sys

import pytest
from click.testing import CliRunner

from src import __version__
from src.detector import load_threshold
from src.main import EXIT_CONFIG, EXIT_INTEGRITY, EXIT_IO, main

TINY_RUN = {
    "seed": 0,
    "train": {"epochs": 40, "batch_size": 16, "learning_rate": 0.05, "hidden_dims": [8, 8]},
    "attacks": [{"kind": "fgsm", "epsilon": 0.2}],
    "evaluation": {"kde_bandwidths": [0.5, 1.0]},
    "synthetic": {"n_per_class": 10, "num_classes": 3, "shape": [4, 4, 1], "separation": 1.2, "noise": 0.05},
}


def _rows(path):
    with open(path) as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps(TINY_RUN))
    return root, config


@pytest.fixture(scope="module")
def run(workspace):
    """Train once and archive FGSM images; later tests reuse the outputs."""
    root, config = workspace
    out = root / "run"
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(main, ["--config", str(config), "--out", str(out), *args])

    trained = invoke("train")
    assert trained.exit_code == 0, trained.output
    attacked = invoke("attack", "--model", str(out / "model.vgm"))
    assert attacked.exit_code == 0, attacked.output
    return out, invoke


def test_train_writes_checkpoint_and_metrics(run):
    out, _ = run
    assert (out / "model.vgm").exists() and (out / "model.vgm.json").exists()
    metrics = _rows(out / "train_metrics.csv")
    assert metrics[0] == ["epoch", "loss", "train_accuracy", "heldout_accuracy"]
    assert len(metrics) == 41
    snapshot = json.loads((out / "run_config.json").read_text())
    assert snapshot["synthetic"]["num_classes"] == 3


def test_attack_writes_archive_and_summary(run):
    out, _ = run
    assert (out / "archive" / "manifest.json").exists()
    summary = _rows(out / "attack_summary.csv")
    assert summary[1][:3] == ["fgsm", "0.2", "30"]


def test_calibrate(run):
    out, invoke = run
    result = invoke("calibrate", "--model", str(out / "model.vgm"), "--archive", str(out / "archive"))
    assert result.exit_code == 0, result.output
    threshold = json.loads((out / "threshold.json").read_text())
    assert threshold["transform"] == "jpeg92"
    assert isinstance(threshold["tau"], float) or threshold["tau"] == "inf"
    assert load_threshold(out / "threshold.json").tau >= 0.0
    assert threshold["positives"] + threshold["negatives"] == 60
    assert _rows(out / "roc.csv")[0] == ["fpr", "tpr", "tau"]


def test_kde_then_eval(run):
    out, invoke = run
    fitted = invoke("kde", "--model", str(out / "model.vgm"))
    assert fitted.exit_code == 0, fitted.output
    assert (out / "kde.bin").exists()
    result = invoke("eval", "--model", str(out / "model.vgm"), "--archive", str(out / "archive"),
                    "--transform", "jpeg:92", "--transform", "median:3", "--kde", str(out / "kde.bin"),
                    "--mixture")
    assert result.exit_code == 0, result.output
    rows = _rows(out / "results.csv")
    assert rows[0] == ["attack", "parameter", "transform", "auc", "tau", "tpr", "fpr", "mean_ms"]
    assert [(r[0], r[2]) for r in rows[1:]] == [("fgsm", "jpeg92"), ("fgsm", "median3"), ("fgsm", "kde")]
    assert all(0.0 <= float(r[3]) <= 1.0 for r in rows[1:])
    assert len(list((out / "roc").glob("*.csv"))) == 3
    stats = _rows(out / "score_stats.csv")
    assert stats[0] == ["attack", "parameter", "transform", "images", "mean_j", "var_j"]
    assert [(r[0], r[2], r[3]) for r in stats[1:]] == [("fgsm", "jpeg92", "30"), ("fgsm", "median3", "30")]
    assert all(float(r[4]) >= 0.0 and float(r[5]) >= 0.0 for r in stats[1:])


def test_detect_with_zero_tau_flags_everything(run):
    out, invoke = run
    result = invoke("detect", "--model", str(out / "model.vgm"), "--dataset", "synthetic", "--limit", "5",
                    "--tau", "0")
    assert result.exit_code == 0, result.output
    rows = _rows(out / "detections.csv")
    assert len(rows) == 6
    assert all(r[3] == "1" for r in rows[1:])


def test_detect_with_calibrated_threshold(run):
    out, invoke = run
    calibrated = invoke("calibrate", "--model", str(out / "model.vgm"), "--archive", str(out / "archive"),
                        "--transform", "median:3")
    assert calibrated.exit_code == 0, calibrated.output
    tau = load_threshold(out / "threshold.json").tau
    result = invoke("detect", "--model", str(out / "model.vgm"), "--dataset", "synthetic", "--limit", "3",
                    "--threshold", str(out / "threshold.json"))
    assert result.exit_code == 0, result.output
    rows = _rows(out / "detections.csv")
    assert all(r[4] == "median3" and float(r[2]) == pytest.approx(tau) for r in rows[1:])
    # a score printed equal to tau may sit a rounding error either side of it
    assert all(r[3] == str(int(float(r[1]) > float(r[2]))) for r in rows[1:] if r[1] != r[2])
    overridden = invoke("detect", "--model", str(out / "model.vgm"), "--dataset", "synthetic", "--limit", "3",
                        "--threshold", str(out / "threshold.json"), "--tau", "0")
    assert overridden.exit_code == 0, overridden.output
    assert all(r[2] == "0" and r[4] == "median3" for r in _rows(out / "detections.csv")[1:])


def test_whitebox_vg_attack_against_fixed_and_pooled_transforms(run, workspace):
    out, _ = run
    root, config = workspace
    other = root / "whitebox"
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(main, ["--config", str(config), "--out", str(other), *args])

    attacked = invoke("attack", "--model", str(out / "model.vgm"), "--attack", "cw_whitebox_vg")
    assert attacked.exit_code == 0, attacked.output
    assert _rows(other / "attack_summary.csv")[1][:3] == ["cw_whitebox_vg", "1", "30"]
    result = invoke("eval", "--model", str(out / "model.vgm"), "--archive", str(other / "archive"),
                    "--transform", "jpeg92", "--transform", "pool:jpeg75,jpeg92,jpeg98,median3")
    assert result.exit_code == 0, result.output
    rows = _rows(other / "results.csv")
    assert [(r[0], r[2]) for r in rows[1:]] == [
        ("cw_whitebox_vg", "jpeg92"), ("cw_whitebox_vg", "pool:jpeg75,jpeg92,jpeg98,median3@0"),
    ]
    assert len(_rows(other / "score_stats.csv")) == 3


def test_detect_image_files(run):
    out, invoke = run
    dumped = invoke("dump", "--dataset", "synthetic", "--index", "2", "--transform", "median:3")
    assert dumped.exit_code == 0, dumped.output
    assert (out / "test_2.pgm").exists() and (out / "test_2_median3.pgm").exists()
    result = invoke("detect", "--model", str(out / "model.vgm"), str(out / "test_2.pgm"), "--tau", "5")
    assert result.exit_code == 0, result.output
    rows = _rows(out / "detections.csv")
    assert rows[1][0] == "test_2.pgm" and rows[1][2] == "5"
    assert "test_2.pgm," in result.output


def test_noise_and_bench(run):
    out, invoke = run
    result = invoke("noise", "--model", str(out / "model.vgm"), "--sigma", "0")
    assert result.exit_code == 0, result.output
    assert json.loads((out / "noise.json").read_text())["auc"] == pytest.approx(0.5)
    result = invoke("bench", "--model", str(out / "model.vgm"), "--kde", str(out / "kde.bin"), "--limit", "5")
    assert result.exit_code == 0, result.output
    report = json.loads((out / "bench.json").read_text())
    assert report["images"] == 5 and 0 < report["vg_state_bytes"] < 200
    assert report["kde_state_bytes"] > 0


def test_missing_checkpoint_is_a_config_error(workspace):
    root, config = workspace
    out = root / "never"
    result = CliRunner().invoke(main, ["--config", str(config), "--out", str(out), "attack",
                                       "--model", str(root / "missing.vgm")])
    assert result.exit_code == EXIT_CONFIG
    assert not out.exists()


def test_archive_from_another_model_is_rejected(run, workspace):
    out, _ = run
    root, config = workspace
    other = root / "other"
    runner = CliRunner()
    trained = runner.invoke(main, ["--config", str(config), "--out", str(other), "train", "--epochs", "1"])
    assert trained.exit_code == 0, trained.output
    result = runner.invoke(main, ["--config", str(config), "--out", str(other), "calibrate",
                                  "--model", str(other / "model.vgm"), "--archive", str(out / "archive")])
    assert result.exit_code == EXIT_INTEGRITY


def test_corrupt_checkpoint_is_an_io_error(workspace):
    root, config = workspace
    bad = root / "bad.vgm"
    bad.write_bytes(b"garbage")
    result = CliRunner().invoke(main, ["--config", str(config), "--out", str(root / "bad"), "detect",
                                       "--model", str(bad), "--dataset", "synthetic"])
    assert result.exit_code == EXIT_IO


def test_bad_config_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"detector": {"tau": -1}}))
    result = CliRunner().invoke(main, ["--config", str(path), "--config-show"])
    assert result.exit_code == EXIT_CONFIG


def test_config_show(workspace):
    _, config = workspace
    result = CliRunner().invoke(main, ["--config", str(config), "--config-show"])
    assert result.exit_code == 0
    assert "jpeg92" in result.output


def test_module_entry_point():
    result = subprocess.run([sys.executable, "-m", "src.main", "--version"], capture_output=True, text=True)
    assert result.returncode == 0
    assert __version__ in result.stdout
