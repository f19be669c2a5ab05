import json
import subprocess
import sys

import numpy as np
import pytest

from landseg import io
from landseg import tensor as T
from landseg.cli import run
from landseg.nn import build_network, save_checkpoint, toy_spec
from landseg.synthetic import make_scene


@pytest.fixture
def dataset(tmp_path):
    """Two 32x32 synthetic tiles (one train, one test) and their manifest."""
    recs = []
    for i, split in enumerate(("train", "test")):
        irrg, ndsm, lab = make_scene(32, seed=i)
        io.save_raster(np.round(irrg * 255)[None] / 255, tmp_path / f"t{i}_irrg.png")
        io.save_raster(np.round(ndsm * 255)[None] / 255, tmp_path / f"t{i}_ndsm.png")
        io.save_labels(lab, tmp_path / f"t{i}_lab.png")
        recs.append(io.TileRecord(f"t{i}_irrg.png", f"t{i}_ndsm.png", f"t{i}_lab.png", split))
    io.write_manifest(recs, tmp_path / "tiles.tsv")
    return tmp_path


def test_unknown_flag_is_usage_error(capsys):
    assert run(["evaluate", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_command_is_usage_error():
    assert run([]) == 1


def test_bad_thread_count():
    assert run(["--threads", "0", "demo", "--out", "x"]) == 1


def test_evaluate_identical_maps(tmp_path, capsys):
    lab = make_scene(32, seed=3)[2]
    io.save_labels(lab, tmp_path / "a.png")
    assert run(["evaluate", "--out", str(tmp_path / "ev"), "--pred", str(tmp_path / "a.png"),
                "--ref", str(tmp_path / "a.png")]) == 0
    doc = json.loads((tmp_path / "ev" / "run.json").read_text())
    assert doc["overall_accuracy"] == 1.0
    assert "OA" in capsys.readouterr().out
    assert (tmp_path / "ev" / "metrics.csv").exists() and (tmp_path / "ev" / "confusion.csv").exists()


def test_evaluate_mismatched_lists(tmp_path):
    assert run(["evaluate", "--out", str(tmp_path), "--pred", "a.png", "b.png", "--ref", "a.png"]) == 1


def test_missing_file_is_data_error(tmp_path):
    assert run(["evaluate", "--out", str(tmp_path), "--pred", str(tmp_path / "nope.png"),
                "--ref", str(tmp_path / "nope.png")]) == 2


def test_full_pipeline_on_manifest(dataset, caplog):
    d = dataset
    caplog.set_level("INFO")
    assert run(["train", "--manifest", str(d / "tiles.tsv"), "--out", str(d / "train"), "--widths", "4,8",
                "--atrous-blocks", "2", "--epochs", "2", "--batch-size", "4", "--patch-size", "16",
                "--lr", "1e-3"]) == 0
    cfg = json.loads((d / "train" / "run.json").read_text())["config"]
    assert cfg["network"]["widths"] == [4, 8] and cfg["training"]["epochs"] == 2
    assert any("train config" in r.message and '"lr": 0.001' in r.message for r in caplog.records)

    assert run(["predict", "--checkpoint", str(d / "train" / "checkpoint"), "--manifest", str(d / "tiles.tsv"),
                "--out", str(d / "pred"), "--patch", "16", "--core", "8"]) == 0
    probs = T.load(d / "pred" / "t1_irrg.probs.rt01")
    assert probs.shape == (1, 6, 32, 32)

    assert run(["refine", "--manifest", str(d / "tiles.tsv"), "--probs-dir", str(d / "pred"),
                "--out", str(d / "crf"), "--iters", "2"]) == 0
    assert (d / "crf" / "t1_irrg.crf.labels.png").exists()

    assert run(["evaluate", "--manifest", str(d / "tiles.tsv"), "--pred-dir", str(d / "crf"),
                "--suffix", ".crf.labels.png", "--out", str(d / "ev"), "--erode", "1",
                "--label", "AC-FCRF"]) == 0
    report = (d / "ev" / "report.txt").read_text()
    assert "AC-FCRF" in report and "building" in report and "ref \\ pred" in report


def test_config_file_with_overrides(dataset):
    d = dataset
    (d / "cfg.json").write_text(json.dumps({"widths": [4, 8], "atrous_blocks": 2, "epochs": 3, "lr": 0.5,
                                            "batch_size": 2, "patch_size": 16, "use_ndsm": False}))
    assert run(["train", "--manifest", str(d / "tiles.tsv"), "--out", str(d / "tr"), "--config",
                str(d / "cfg.json"), "--epochs", "1", "--lr", "0.001"]) == 0
    cfg = json.loads((d / "tr" / "run.json").read_text())["config"]
    assert cfg["training"]["epochs"] == 1 and cfg["training"]["lr"] == 0.001
    assert cfg["network"]["use_ndsm"] is False and cfg["training"]["batch_size"] == 2


def test_unknown_config_key_is_data_error(dataset):
    (dataset / "cfg.json").write_text(json.dumps({"epochz": 3}))
    assert run(["train", "--manifest", str(dataset / "tiles.tsv"), "--out", str(dataset / "tr"),
                "--config", str(dataset / "cfg.json")]) == 2


def test_single_image_predict_and_refine(dataset):
    d = dataset
    net = build_network(toy_spec(), seed=0)
    save_checkpoint(net, d / "ck")
    assert run(["predict", "--checkpoint", str(d / "ck"), "--image", str(d / "t1_irrg.png"),
                "--ndsm", str(d / "t1_ndsm.png"), "--out", str(d / "p"), "--patch", "16", "--core", "8"]) == 0
    assert run(["refine", "--probs", str(d / "p" / "t1_irrg.probs.rt01"), "--image", str(d / "t1_irrg.png"),
                "--out", str(d / "r"), "--method", "exact", "--iters", "1"]) == 0
    assert io.load_labels(d / "r" / "t1_irrg.crf.labels.png").shape == (32, 32)


def test_bad_tile_scheme_is_usage_error(dataset):
    save_checkpoint(build_network(toy_spec(), seed=0), dataset / "ck")
    assert run(["predict", "--checkpoint", str(dataset / "ck"), "--image", str(dataset / "t1_irrg.png"),
                "--ndsm", str(dataset / "t1_ndsm.png"), "--out", str(dataset / "p"), "--patch", "20",
                "--core", "8"]) == 1


def test_non_finite_network_is_numeric_failure(dataset):
    net = build_network(toy_spec(), seed=0)
    net.parameters()["head.conv.weight"][:] = np.nan
    save_checkpoint(net, dataset / "ck")
    assert run(["predict", "--checkpoint", str(dataset / "ck"), "--image", str(dataset / "t1_irrg.png"),
                "--ndsm", str(dataset / "t1_ndsm.png"), "--out", str(dataset / "p"), "--patch", "16",
                "--core", "8"]) == 3


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "landseg", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "demo" in out.stdout
