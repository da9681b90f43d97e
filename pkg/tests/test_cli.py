"""End-to-end CLI run on a tiny dataset: every subcommand, every output format."""

import csv
import json

import numpy as np
import pytest

from weaktr import serialization as ser
from weaktr.cli import build_parser, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = {
        "encoder": {"patch_size": 8, "embed_dim": 8, "layers": 1, "heads": 2},
        "train": {"epochs": 2, "batch_size": 2, "warmup_epochs": 1},
        "seeds": {"background_threshold": 0.4},
        "decoder": {"decoder_layers": 1, "grad_patch_size": 8},
    }
    (root / "config.json").write_text(json.dumps(config))
    assert main(["gen-data", "--out", str(root / "data"), "--count", "4", "--seed", "3",
                 "--classes", "3", "--size", "32"]) == 0
    assert main(["train-cam", "--data", str(root / "data"), "--config", str(root / "config.json"),
                 "--out", str(root / "cam")]) == 0
    assert main(["export-cam", "--ckpt", str(root / "cam"), "--data", str(root / "data"),
                 "--out", str(root / "export"), "--config", str(root / "config.json")]) == 0
    retrain_cfg = dict(config, train={"epochs": 1, "batch_size": 2})
    (root / "retrain.json").write_text(json.dumps(retrain_cfg))
    assert main(["retrain", "--data", str(root / "data"), "--seeds", str(root / "export"),
                 "--config", str(root / "retrain.json"), "--out", str(root / "seg"),
                 "--tau", "5.0", "--patch", "8", "--init", str(root / "cam"),
                 "--val", str(root / "data")]) == 0
    return root


def test_gen_data_layout(workspace):
    d = workspace / "data"
    assert len(list((d / "images").glob("*.wtt"))) == 4
    assert len(list((d / "masks").glob("*.wtt"))) == 4
    rows = list(csv.reader(open(d / "labels.csv")))
    assert rows[0][:4] == ["index", "class_0", "class_1", "class_2"]
    assert json.loads((d / "config.json").read_text())["data"]["image_size"] == 32


def test_train_cam_outputs(workspace):
    manifest = ser.load_manifest(workspace / "cam")
    assert manifest["kind"] == "cam"
    assert manifest["config"]["encoder"]["embed_dim"] == 8
    rows = list(csv.DictReader(open(workspace / "cam" / "curve.csv")))
    assert len(rows) == 2 and all(np.isfinite(float(r["loss"])) for r in rows)


def test_export_cam_outputs(workspace):
    e = workspace / "export"
    cam = ser.read_tensor(e / "cams" / "0000.wtt")
    assert cam.shape == (4, 4, 3)
    heat = ser.read_pgm(e / "heatmaps" / "0000_c0.pgm")
    assert heat.shape == (4, 4)
    seeds = ser.read_tensor(e / "seeds" / "0000.wtt")
    assert seeds.shape == (32, 32) and seeds.max() <= 3
    report = json.loads((e / "seed_report.json").read_text())
    assert 0.0 <= report["miou"] <= 1.0


def test_retrain_outputs(workspace):
    s = workspace / "seg"
    assert ser.load_manifest(s)["kind"] == "seg"
    rows = list(csv.DictReader(open(s / "curve.csv")))
    assert len(rows) == 2
    assert {"lambda_global", "gated", "precision_retained"} <= set(rows[0])
    assert "miou" in json.loads((s / "val_report.json").read_text())


def test_eval_report(workspace):
    out = workspace / "report.json"
    assert main(["eval", "--ckpt", str(workspace / "seg"), "--data", str(workspace / "data"),
                 "--report", str(out)]) == 0
    report = json.loads(out.read_text())
    assert len(report["per_class_iou"]) == 4


def test_inspect_attention(workspace):
    out = workspace / "attn"
    assert main(["inspect-attention", "--ckpt", str(workspace / "cam"),
                 "--image", str(workspace / "data" / "images" / "0001.wtt"), "--out", str(out)]) == 0
    assert ser.read_pgm(out / "ca_h0_c2.pgm").shape == (4, 4)
    assert ser.read_pgm(out / "pa_h1.pgm").shape == (16, 16)
    rows = list(csv.DictReader(open(out / "head_weights.csv")))
    assert len(rows) == 2 and all(0 < float(r["w_prime"]) < 1 for r in rows)


def test_inspect_clip(workspace):
    out = workspace / "clip"
    assert main(["inspect-clip", "--ckpt", str(workspace / "seg"), "--data", str(workspace / "data"),
                 "--seeds", str(workspace / "export"), "--out", str(out), "--count", "2",
                 "--tau", "100"]) == 0
    mask = ser.read_pgm(out / "0000_mask.pgm")
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 255}
    rows = list(csv.DictReader(open(out / "lambda.csv")))
    assert len(rows) == 2 * 16


def test_conflicting_clip_flags(workspace):
    with pytest.raises(SystemExit):
        main(["retrain", "--data", str(workspace / "data"), "--seeds", str(workspace / "export"),
              "--out", str(workspace / "x"), "--no-clip", "--gt-clip"])


def test_parser_lists_every_command():
    text = build_parser().format_help()
    for cmd in ("gen-data", "train-cam", "export-cam", "retrain", "eval", "inspect-attention", "inspect-clip"):
        assert cmd in text
