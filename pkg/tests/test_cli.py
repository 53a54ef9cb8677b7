import json

import numpy as np
import pytest

from panoptiq.cli import main
from panoptiq.data import load_manifest, load_mask
from panoptiq.evaluation import EvalReport


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny end-to-end workspace: toy data, a 1-epoch checkpoint, INT8 export."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data" / "train"
    assert main(["toygen", "--out", str(data), "--seed", "0", "--n-images", "8"]) == 0

    config = {
        "seed": 0,
        "network": {"width_multiple": 0.25},
        "schedule": {
            "eval_every": 0,
            "stages": [
                {
                    "name": "pretrain1", "epochs": 1, "batch_size": 4,
                    "lr_init": 1e-3, "lr_min": 1e-5,
                    "datasets": ["data/train/manifest.json"],
                }
            ],
        },
        "data": {"val_manifest": None},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    run_dir = root / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(run_dir)]) == 0
    ckpt = run_dir / "stage0_pretrain1.ckpt.zip"
    assert ckpt.exists()

    q_dir = root / "quant"
    assert main([
        "quantize", "--checkpoint", str(ckpt), "--mode", "ptq",
        "--calibration", str(data / "manifest.json"), "--out", str(q_dir),
    ]) == 0
    return {
        "root": root,
        "manifest": data / "manifest.json",
        "config": cfg_path,
        "checkpoint": ckpt,
        "int8": q_dir / "model_int8.zip",
        "run_dir": run_dir,
    }


class TestToygen:
    def test_idempotent_outputs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["toygen", "--out", str(a), "--seed", "5", "--n-images", "2"]) == 0
        assert main(["toygen", "--out", str(b), "--seed", "5", "--n-images", "2"]) == 0
        for f in sorted(a.iterdir()):
            assert f.read_bytes() == (b / f.name).read_bytes()


class TestTrain:
    def test_dry_run(self, workspace):
        assert main([
            "train", "--config", str(workspace["config"]),
            "--out", str(workspace["root"] / "dry"), "--dry-run",
        ]) == 0

    def test_schema_violation_single_line_error(self, workspace, capsys):
        bad = workspace["root"] / "bad.json"
        bad.write_text(json.dumps({"schedule": {"stages": [{"name": "warmup"}]}}))
        rc = main(["train", "--config", str(bad), "--out", str(workspace["root"] / "x")])
        assert rc != 0
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1
        doc = json.loads(err)
        assert "schedule.stages" in doc["error"]["message"]

    def test_unknown_key_rejected(self, workspace, capsys):
        bad = workspace["root"] / "bad2.json"
        bad.write_text(json.dumps({"optimizer": "sgd"}))
        rc = main(["train", "--config", str(bad), "--out", str(workspace["root"] / "y")])
        assert rc != 0
        doc = json.loads(capsys.readouterr().err.strip())
        assert doc["error"]["type"] == "ConfigError"


class TestQuantizeAndEval:
    def test_eval_reports_schema_identical(self, workspace):
        out_f = workspace["root"] / "eval_float"
        out_q = workspace["root"] / "eval_int8"
        assert main(["eval", "--model", str(workspace["checkpoint"]),
                     "--manifest", str(workspace["manifest"]), "--out", str(out_f)]) == 0
        assert main(["eval", "--model", str(workspace["int8"]),
                     "--manifest", str(workspace["manifest"]), "--out", str(out_q)]) == 0
        a = json.loads((out_f / "eval_report.json").read_text())
        b = json.loads((out_q / "eval_report.json").read_text())
        assert set(a) == set(b)
        EvalReport(**a)
        EvalReport(**b)

    def test_qat_export_requires_qat_checkpoint(self, workspace, capsys):
        rc = main(["quantize", "--checkpoint", str(workspace["checkpoint"]),
                   "--mode", "qat-export", "--out", str(workspace["root"] / "qx")])
        assert rc != 0
        assert "QAT" in json.loads(capsys.readouterr().err.strip())["error"]["message"]


class TestInferAndReport:
    def test_infer_outputs(self, workspace):
        records = load_manifest(workspace["manifest"])
        image = records[0].image_path
        out = workspace["root"] / "infer"
        assert main(["infer", "--model", str(workspace["checkpoint"]),
                     "--out", str(out), "--overlay", str(image)]) == 0
        stem = image.stem
        doc = json.loads((out / f"{stem}.json").read_text())
        assert "boxes" in doc
        mask = load_mask(out / f"{stem}_mask.png", "merged")
        assert mask.shape == (96, 160)
        assert (out / f"{stem}_overlay.png").exists()

    def test_report_plots(self, workspace):
        out = workspace["root"] / "plots"
        log = workspace["run_dir"] / "train_log.jsonl"
        assert main(["report", "--out", str(out), str(log)]) == 0
        assert (out / "loss_curves.png").exists()


class TestPrepare:
    def test_source_annotations_to_manifest(self, workspace, tmp_path):
        records = load_manifest(workspace["manifest"])
        source = {
            "images": [
                {
                    "id": "img0",
                    "image_path": str(records[0].image_path),
                    "width": 160,
                    "height": 96,
                    "objects": [
                        {"category": "rider", "box": [10, 10, 20, 30]},
                        {"category": "bicycle", "box": [8, 22, 24, 40]},
                        {"category": "car", "box": [60, 40, 100, 64]},
                    ],
                    "drivable": [
                        {"category": "main_lane",
                         "polygon": [[0, 60], [160, 60], [160, 96], [0, 96]]},
                    ],
                    "lanes": [
                        {"category": "dashed_line", "polyline": [[40, 60], [40, 96]]},
                    ],
                }
            ]
        }
        src = tmp_path / "source.json"
        src.write_text(json.dumps(source))
        out = tmp_path / "prepared"
        assert main(["prepare", "--source", str(src), "--out", str(out)]) == 0
        prepared = load_manifest(out / "manifest.json")
        assert len(prepared) == 1
        sample = prepared[0].load()
        assert sorted(b.class_id for b in sample.boxes) == [1, 3]  # car + merged bicycle
        assert sample.drivable.class_map.any()
        assert sample.lane.class_map.any()
