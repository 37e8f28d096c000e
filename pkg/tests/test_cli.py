import csv
import json
import os

import numpy as np
import pytest
from filelock import FileLock

from conftest import MINI_CFG, TRAIN_STAGES, run_cli
from zsc.cli import AXES, latest_run, run_ablation, StageError
from zsc.selector import MODES


@pytest.fixture
def in_runs(mini_runs, monkeypatch):
    monkeypatch.setenv("ZSC_RUN_DIR", str(mini_runs))
    return mini_runs


def val_image(root):
    ds = latest_run(root, "synth-data") / "dataset"
    manifest = json.loads((ds / "manifest.json").read_text())
    image_id = manifest["splits"]["val"][0]
    ann = json.loads((ds / "annotations" / "annotations.json").read_text())
    return ds / "images" / image_id, ann[image_id]["class_name"]


def test_manifests(in_runs):
    for stage in TRAIN_STAGES + ("eval",):
        m = json.loads((latest_run(in_runs, stage) / "manifest.json").read_text())
        assert m["stage"] == stage
        assert {"config_hash", "seed", "artifact_version", "duration_s"} <= set(m)
        assert m["duration_s"] >= 0


def test_eval_reports_all_modes(in_runs):
    out = latest_run(in_runs, "eval")
    report = json.loads((out / "metrics.json").read_text())
    assert set(MODES) <= set(report)
    for m in MODES:
        assert report[m]["rmse"] >= report[m]["mae"] >= 0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["mode"] for r in rows] == list(MODES)


def test_infer_prints_one_count_line(in_runs, capsys):
    img, cls = val_image(in_runs)
    assert run_cli("infer", "--config", MINI_CFG, "--image", str(img), "--class", cls) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.strip()]
    assert len(lines) == 1 and lines[0].startswith("count: ")
    out = latest_run(in_runs, "infer")
    assert (out / "density.png").is_file() and (out / "heatmap.png").is_file()
    sel = json.loads((out / "selection.json").read_text())
    assert float(lines[0].split()[1]) == pytest.approx(sel["count"], abs=1e-4)
    assert abs(np.load(out / "density.npy").sum() - sel["count"]) < 1e-6


def test_ablation_rows(in_runs):
    assert run_cli("ablate", "--config", MINI_CFG, "--axis", "num_exemplars") == 0
    with open(latest_run(in_runs, "ablate") / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["value"]) for r in rows] == [1, 2, 3, 4, 5]
    assert AXES["k_neighbors"][1] == (5, 10, 25, 50)
    assert AXES["num_proposals"][1] == (150, 300, 450, 600)


def test_ablation_empty_values():
    with pytest.raises(ValueError):
        run_ablation("num_exemplars", [], None, None, [])
    with pytest.raises(ValueError):
        run_ablation("colour", [1], None, None, [])


def test_missing_prerequisite_names_stage(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ZSC_RUN_DIR", str(tmp_path))
    assert run_cli("train-counter", "--config", MINI_CFG) == 2
    assert "zsc synth-data" in capsys.readouterr().err


def test_bad_config_key(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ZSC_RUN_DIR", str(tmp_path))
    assert run_cli("synth-data", "--config", MINI_CFG, "--set", "selector.q=1") == 2
    assert "selector.q" in capsys.readouterr().err


def test_stale_checkpoint_needs_force(in_runs, capsys):
    args = ("eval", "--config", MINI_CFG, "--set", "counter.lr=0.1", "--modes", "gt-exemplar")
    assert run_cli(*args) == 2
    assert "--force" in capsys.readouterr().err
    assert run_cli(*args, "--force") == 0


def test_selector_override_keeps_predictor_valid(in_runs):
    assert run_cli("eval", "--config", MINI_CFG, "--set", "selector.k=8",
                   "--modes", "prototype+predictor") == 0


def test_lock_blocks_second_process(in_runs, capsys):
    with FileLock(str(in_runs / ".zsc.lock")):
        assert run_cli("eval", "--config", MINI_CFG, "--modes", "gt-exemplar") == 2
    assert "another zsc stage" in capsys.readouterr().err


def test_rerun_makes_new_dir_and_overwrite_reuses(tmp_path, monkeypatch):
    monkeypatch.setenv("ZSC_RUN_DIR", str(tmp_path))
    assert run_cli("synth-data", "--config", MINI_CFG) == 0
    first = latest_run(tmp_path, "synth-data")
    assert run_cli("synth-data", "--config", MINI_CFG) == 0
    dirs = sorted((tmp_path / "synth-data").iterdir())
    assert len(dirs) == 2 and first in dirs
    assert run_cli("synth-data", "--config", MINI_CFG, "--overwrite") == 0
    assert sorted((tmp_path / "synth-data").iterdir()) == dirs
    # earlier run untouched
    assert (first / "manifest.json").is_file()


def test_infer_needs_arguments(in_runs):
    assert run_cli("infer", "--config", MINI_CFG) == 2


def test_latest_run_error(tmp_path):
    with pytest.raises(StageError):
        latest_run(tmp_path, "train-vae")
