import json
import subprocess
import sys

import pytest

from gatedprune.cli import main
from gatedprune.pipeline import ExperimentConfig, ThresholdPolicy


@pytest.fixture
def mini_config(tmp_path):
    cfg = ExperimentConfig(
        spec="mini_resnet",
        dataset="synthetic",
        synthetic_n=40,
        synthetic_test_n=20,
        granularities=["filter", "layer"],
        epochs=1,
        fine_tune_binarized=1,
        fine_tune=1,
        batch_size=16,
        threshold=ThresholdPolicy(step=0.1),
        save_checkpoints=False,
    )
    path = tmp_path / "mini.json"
    path.write_text(cfg.to_json())
    return path


def test_validate_spec_prints_shape_table(capsys):
    assert main(["validate-spec", "vgg16_custom"]) == 0
    out = capsys.readouterr().out
    assert "conv13" in out and "params" in out


def test_validate_spec_reports_skipped_sites(capsys):
    assert main(["validate-spec", "vgg16_custom", "--granularities", "layer"]) == 0
    assert "skipped layer sites (4)" in capsys.readouterr().out


def test_unknown_granularity_is_a_usage_error(capsys, mini_config):
    assert main(["prune", "--config", str(mini_config), "--granularities", "filter,bogus"]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error: usage:") and "bogus" in err


def test_unknown_flag_and_missing_config(capsys, tmp_path):
    assert main(["prune", "--config", "x.json", "--frobnicate"]) == 2
    assert main(["prune", "--config", str(tmp_path / "absent.json")]) == 2
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error: ")


def test_schema_violation(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": 1, "colour": "red"}))
    assert main(["train", "--config", str(bad)]) == 2
    assert "colour" in capsys.readouterr().err


def test_prune_twice_gives_identical_reports(mini_config, tmp_path, capsys):
    for run in ("a", "b"):
        assert main(["prune", "--config", str(mini_config), "--seed", "7", "--out", str(tmp_path / run)]) == 0
    a, b = (tmp_path / "a" / "report.json").read_bytes(), (tmp_path / "b" / "report.json").read_bytes()
    assert a == b
    assert json.loads(a)["meta"]["seed"] == 7
    capsys.readouterr()
    assert main(["report", str(tmp_path / "a")]) == 0
    assert "Params↓" in capsys.readouterr().out


def test_train_writes_checkpoint(mini_config, tmp_path, capsys):
    assert main(["train", "--config", str(mini_config), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "gated.ckpt").exists()
    assert "test_accuracy" in capsys.readouterr().out


def test_sweep_with_explicit_sets(mini_config, tmp_path, capsys):
    assert main(["sweep", "--config", str(mini_config), "--out", str(tmp_path / "s"), "--sets", "filter;layer"]) == 0
    lines = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].split(",")[1] == "filter" and lines[2].split(",")[1] == "layer"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gatedprune", "validate-spec", "mini_vgg8"], capture_output=True, text=True)
    assert proc.returncode == 0 and "fc2" in proc.stdout
