import json
import subprocess
import sys

import numpy as np
import pytest

from sslcd.cli import main
from sslcd.detection import encode_pgm, read_pgm
from sslcd.raster import load_manifest, read_raster

GEN = ["--count", "8", "--size", "40", "40", "--bands", "2", "--change-blobs", "2", "--blob-size", "6", "10", "--texture-scale", "10"]
PRETRAIN = ["--patch-size", "8", "--pairs-per-image", "2", "--val-pairs-per-image", "4", "--batch-size", "8", "--max-epochs", "2"]
LINEAR = ["--patches-per-image", "5", "--patch-size", "8", "--max-epochs", "5", "--patience", "2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-synthetic", *GEN, "--seed", 3, "--out", root / "data") == 0
    assert run("pretrain", "--task", "overlap", "--manifest", root / "data" / "manifest.json", *PRETRAIN, "--seed", 1, "--out", root / "ck") == 0
    return root


def test_gen_synthetic_layout(workspace):
    man = load_manifest(workspace / "data" / "manifest.json")
    assert [len(man.by_split(s)) for s in ("train", "val", "test")] == [7, 1, 0]
    assert man.band_count == 2 and man.metadata["seed"] == 3


def test_pretrain_outputs(workspace, capsys):
    lines = (workspace / "ck" / "train_log.jsonl").read_text().splitlines()
    assert 1 <= len(lines) <= 2
    assert {"epoch", "train_loss", "val_loss", "metric"} <= set(json.loads(lines[0]))
    assert (workspace / "ck" / "manifest.json").is_file()


def test_pipeline_end_to_end(workspace, capsys):
    root = workspace
    man = root / "data" / "manifest.json"
    assert run("select-layer", "--ckpt", root / "ck", "--labeled-manifest", man, "--layers", 1, 2, *LINEAR, "--out", root / "sel.json") == 0
    report = json.loads((root / "sel.json").read_text())
    assert report["selected_layer"] in (1, 2) and set(report["per_layer"]) == {"1", "2"}
    assert "mean AA" in capsys.readouterr().out

    assert run("train-classifier", "--ckpt", root / "ck", "--layer", 2, "--labeled-manifest", man, *LINEAR, "--lr", 1e-3, "--out", root / "clf") == 0
    pair_id = load_manifest(man).entries[0].id
    for clf in ("cva-otsu", "cva-triangle", "linear"):
        extra = ["--linear-model", root / "clf"] if clf == "linear" else []
        out = root / "maps" / clf
        assert run("detect", "--ckpt", root / "ck", "--layer", 2, "--manifest", man, "--pair-id", pair_id, "--classifier", clf, *extra, "--out", out) == 0
        binary = read_pgm(out / f"{pair_id}.pgm")
        assert binary.shape == (1, 40, 40)
        assert read_raster(out / f"{pair_id}_score.raw").shape == (1, 40, 40)
        summary = json.loads((out / f"{pair_id}_metrics.json").read_text())
        assert summary["classifier"] and "f1" in summary["metrics"]

    maps = root / "maps" / "cva-triangle"
    assert run("evaluate", "--pred", maps, "--truth", root / "data", "--out", root / "eval.json") == 0
    rep = json.loads((root / "eval.json").read_text())
    assert list(rep["per_pair"]) == [pair_id] and rep["aggregate"]["counts"]["tp"] >= 0

    assert run("render-map", "--pred", maps / f"{pair_id}.pgm", "--truth", root / "data" / f"{pair_id}_labels.raw", "--out", root / "cmp.ppm") == 0
    blob = (root / "cmp.ppm").read_bytes()
    assert blob.startswith(b"P6\n40 40\n255\n") and len(blob) == len(b"P6\n40 40\n255\n") + 40 * 40 * 3


def test_commands_are_byte_deterministic(workspace, tmp_path):
    assert run("gen-synthetic", *GEN, "--seed", 3, "--out", tmp_path / "data") == 0
    for f in (workspace / "data").iterdir():
        assert (tmp_path / "data" / f.name).read_bytes() == f.read_bytes(), f.name
    assert run("pretrain", "--task", "overlap", "--manifest", tmp_path / "data" / "manifest.json", *PRETRAIN, "--seed", 1, "--out", tmp_path / "ck") == 0
    for f in (workspace / "ck").glob("*.raw"):
        assert (tmp_path / "ck" / f.name).read_bytes() == f.read_bytes(), f.name
    strip = lambda p: [{k: v for k, v in json.loads(s).items() if k != "timing"} for s in p.read_text().splitlines()]
    assert strip(tmp_path / "ck" / "train_log.jsonl") == strip(workspace / "ck" / "train_log.jsonl")


def test_render_map_hand_case(tmp_path):
    (tmp_path / "p.pgm").write_bytes(encode_pgm(np.array([[1, 0], [1, 0]])))
    (tmp_path / "t.pgm").write_bytes(encode_pgm(np.array([[1, 1], [0, 0]])))
    assert run("render-map", "--pred", tmp_path / "p.pgm", "--truth", tmp_path / "t.pgm", "--out", tmp_path / "o.ppm") == 0
    assert (tmp_path / "o.ppm").read_bytes() == b"P6\n2 2\n255\n" + bytes([255, 255, 255, 0, 255, 0, 255, 0, 255, 0, 0, 0])


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        # budget larger than the image
        assert run("gen-synthetic", "--size", "10", "10", "--blob-size", "20", "30", "--out", tmp_path) == 2
        assert "error:" in capsys.readouterr().err

    def test_data_error(self, tmp_path):
        assert run("pretrain", "--task", "overlap", "--manifest", tmp_path / "nope.json", "--out", tmp_path / "ck") == 3
        assert run("evaluate", "--pred", tmp_path, "--truth", tmp_path, "--out", tmp_path / "r.json") == 3

    def test_missing_checkpoint_is_data_error(self, workspace, tmp_path):
        man = workspace / "data" / "manifest.json"
        code = run("detect", "--ckpt", tmp_path, "--layer", 1, "--manifest", man, "--pair-id", "pair_0000", "--out", tmp_path / "o")
        assert code == 3

    def test_linear_without_model(self, workspace, tmp_path):
        man = workspace / "data" / "manifest.json"
        code = run("detect", "--ckpt", workspace / "ck", "--layer", 1, "--manifest", man, "--pair-id", "pair_0000", "--classifier", "linear", "--out", tmp_path)
        assert code == 2

    def test_numerical_error(self, monkeypatch, tmp_path):
        from sslcd import cli
        from sslcd.errors import NumericalError

        def boom(*a, **k):
            raise NumericalError("loss is nan")

        monkeypatch.setattr(cli, "pretrain", boom)
        assert run("gen-synthetic", *GEN, "--out", tmp_path / "d") == 0
        assert run("pretrain", "--task", "overlap", "--manifest", tmp_path / "d" / "manifest.json", "--out", tmp_path / "ck") == 4

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run("pretrain", "--task", "jigsaw")
        assert exc.value.code == 2


class TestConfigFile:
    def test_file_fills_defaults_and_flags_win(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"count": 3, "size": [24, 24], "bands": 1, "change-blobs": 1, "blob_size": [4, 6], "texture_scale": 8, "out": str(tmp_path / "a")}))
        assert run("gen-synthetic", "--config", cfg) == 0
        assert len(load_manifest(tmp_path / "a" / "manifest.json").entries) == 3
        assert run("gen-synthetic", "--config", cfg, "--count", 2, "--out", tmp_path / "b") == 0
        man = load_manifest(tmp_path / "b" / "manifest.json")
        assert len(man.entries) == 2 and man.band_count == 1

    def test_unknown_key_and_bad_json(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"colour": "red"}))
        assert run("gen-synthetic", "--config", cfg, "--out", tmp_path) == 2
        cfg.write_text("{oops")
        assert run("gen-synthetic", "--config", cfg, "--out", tmp_path) == 2
        assert run("gen-synthetic", "--config", tmp_path / "none.json", "--out", tmp_path) == 2


def test_console_script_module_entry():
    out = subprocess.run([sys.executable, "-m", "sslcd.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("sslcd ")
