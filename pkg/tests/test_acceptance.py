"""Acceptance suite.

One test per criterion, each printing a single PASS/FAIL line (run with
``pytest tests/test_acceptance.py -v -s``). Criteria 1-3 share one full toy
training run; criterion 8 performs a second full run for the determinism
comparison, so the whole module takes tens of minutes on CPU.
"""
import json
import math

import numpy as np
import pytest
import torch

from panoptiq.config import make_preset
from panoptiq.data import BBox, load_manifest
from panoptiq.evaluation import average_precision, evaluate_model, miou
from panoptiq.losses import (
    BatchTargets,
    LossWeights,
    assign_targets,
    box_loss,
    det_loss,
    focal_loss,
    jaccard_loss,
    seg_da_loss,
    seg_ll_loss,
    total_loss,
    tversky_loss,
)
from panoptiq.network import (
    ModelOutputs,
    NetworkConfig,
    build,
    count_parameters,
    reparameterize,
    save_checkpoint,
)
from panoptiq.postprocess import nms
from panoptiq.quantization import (
    QuantSpec,
    calibrate_ptq,
    collect_specs,
    export_int8,
    fake_quant_backward,
    fake_quant_forward,
    load_int8,
    load_model,
    quantize,
)
from panoptiq.toyset import SceneSpec, generate
from panoptiq.trainer import run_schedule

from oracles import brute_force_matching, brute_force_nms, random_scored_boxes
from test_losses import check_gradient

TOY_ANCHORS = NetworkConfig().anchor_set


def _verdict(criterion: str, passed: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} ({detail})")
    assert passed, f"{criterion}: {detail}"


def _make_workspace(root):
    generate(SceneSpec(seed=0, n_images=64), root / "data" / "train")
    generate(SceneSpec(seed=101, n_images=32), root / "data" / "extra")
    generate(SceneSpec(seed=202, n_images=16), root / "data" / "val")
    cfg = make_preset("toy", base_dir=root)
    cfg.eval_every = 5
    return cfg


def _run_toy_schedule(root, out_name):
    cfg = _make_workspace(root)
    schedule = cfg.to_schedule()
    model, logs, ckpts = run_schedule(schedule, root / out_name)
    return {"config": cfg, "model": model, "logs": logs, "checkpoints": ckpts, "root": root}


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return _run_toy_schedule(root, "runA")


@pytest.fixture(scope="session")
def val_records(toy_run):
    return load_manifest(toy_run["root"] / "data" / "val" / "manifest.json")


def _calibration_batches(manifest_path, limit=16):
    from panoptiq.augment import normalize

    batches = []
    for r in load_manifest(manifest_path)[:limit]:
        x = normalize(r.load().image)
        batches.append(torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))[None]))
    return batches


class TestCriterion1SizeRatio:
    def test_int8_archive_at_most_30_percent(self, toy_run, tmp_path):
        ckpt_finetune = toy_run["checkpoints"][2]
        model = load_model(ckpt_finetune)
        batches = _calibration_batches(toy_run["root"] / "data" / "train" / "manifest.json")
        specs = calibrate_ptq(model, batches)  # fuses to deployment form
        n_params = count_parameters(model)
        float_ckpt = save_checkpoint(model, tmp_path / "float.ckpt.zip")
        archive = export_int8(model, specs, tmp_path / "model.int8.zip")
        ratio = archive.stat().st_size / float_ckpt.stat().st_size
        _verdict(
            "1 int8-size-ratio",
            n_params >= 1_000_000 and ratio <= 0.30,
            f"params={n_params}, ratio={ratio:.4f} (bound 0.30)",
        )


class TestCriterion2QatVsPtq:
    def test_qat_beats_ptq_and_tracks_float(self, toy_run, val_records, tmp_path):
        root = toy_run["root"]
        ck_finetune, ck_qat = toy_run["checkpoints"][2], toy_run["checkpoints"][3]

        float_report = evaluate_model(load_model(ck_finetune), val_records)

        ptq_model = load_model(ck_finetune)
        specs = calibrate_ptq(
            ptq_model, _calibration_batches(root / "data" / "train" / "manifest.json")
        )
        ptq_archive = export_int8(ptq_model, specs, tmp_path / "ptq.int8.zip")
        ptq_report = evaluate_model(load_int8(ptq_archive), val_records)

        qat_model = load_model(ck_qat)
        qat_specs = collect_specs(qat_model)
        qat_archive = export_int8(qat_model, qat_specs, tmp_path / "qat.int8.zip")
        qat_report = evaluate_model(load_int8(qat_archive), val_records)

        ok = (
            qat_report.drivable_miou >= ptq_report.drivable_miou
            and qat_report.lane_miou >= ptq_report.lane_miou
            and qat_report.drivable_miou >= 0.95 * float_report.drivable_miou
            and qat_report.lane_miou >= 0.95 * float_report.lane_miou
        )
        _verdict(
            "2 qat-vs-ptq-ordering",
            ok,
            "drivable mIoU qat/ptq/float = %.3f/%.3f/%.3f; lane = %.3f/%.3f/%.3f"
            % (
                qat_report.drivable_miou, ptq_report.drivable_miou, float_report.drivable_miou,
                qat_report.lane_miou, ptq_report.lane_miou, float_report.lane_miou,
            ),
        )


class TestCriterion3ToyLearnability:
    def test_pretrain1_reaches_floors(self, toy_run):
        train_records = load_manifest(toy_run["root"] / "data" / "train" / "manifest.json")
        model = load_model(toy_run["checkpoints"][0])
        report = evaluate_model(model, train_records)
        ok = report.map50 >= 0.9 and report.merged_miou >= 0.85
        _verdict(
            "3 toy-learnability",
            ok,
            f"train mAP@0.5={report.map50:.4f} (floor 0.9), "
            f"merged mIoU={report.merged_miou:.4f} (floor 0.85)",
        )


class TestCriterion4GradientSuite:
    N_FIXTURES = 20

    def test_all_losses_match_finite_differences(self):
        rng = np.random.default_rng(2024)
        small_grids = [(2, 2), (1, 1), (1, 1)]

        def random_boxes():
            boxes = []
            for _ in range(2):
                w, h = rng.uniform(6, 40, 2)
                x1, y1 = rng.uniform(0, 120 - w), rng.uniform(0, 60 - h)
                boxes.append(BBox(x1, y1, x1 + w, y1 + h, int(rng.integers(0, 4))))
            return boxes

        for trial in range(self.N_FIXTURES):
            x = torch.from_numpy(rng.normal(0, 2, (13,)))
            t = torch.from_numpy(rng.uniform(0, 1, (13,)))
            check_gradient(lambda: focal_loss(x, t, 2.0, 0.25), x)

            x = torch.from_numpy(rng.normal(0, 1.5, (6, 4)))
            tgt = torch.from_numpy(rng.normal(0, 1.5, (6, 4)))
            check_gradient(lambda: box_loss(x, tgt), x)

            x = torch.from_numpy(rng.normal(0, 1, (4, 4, 3)))
            m = torch.from_numpy(rng.integers(0, 3, (4, 4)))
            check_gradient(lambda: tversky_loss(torch.softmax(x, -1), m), x)
            x = torch.from_numpy(rng.normal(0, 1, (4, 4, 3)))
            check_gradient(lambda: jaccard_loss(torch.softmax(x, -1), m), x)

            x = torch.from_numpy(rng.normal(0, 1, (4, 4, 4)))
            m4 = torch.from_numpy(rng.integers(0, 4, (4, 4)))
            check_gradient(lambda: seg_ll_loss(x, m4, LossWeights())[0], x)
            x = torch.from_numpy(rng.normal(0, 1, (4, 4, 3)))
            check_gradient(lambda: seg_da_loss(x, m, LossWeights())[0], x)

            assigned = [assign_targets(random_boxes(), TOY_ANCHORS, small_grids)]
            x = torch.from_numpy(rng.normal(0, 1, (1, 2, 2, 3, 9)))
            rest = [torch.from_numpy(rng.normal(0, 1, (1, gh, gw, 3, 9)))
                    for gh, gw in small_grids[1:]]
            check_gradient(
                lambda: det_loss([x] + rest, assigned, TOY_ANCHORS, LossWeights())[0], x
            )

            drv = torch.from_numpy(rng.normal(0, 1, (1, 3, 3, 3)))
            lane = torch.from_numpy(rng.normal(0, 1, (1, 3, 3, 4)))
            targets = BatchTargets(
                assigned,
                torch.from_numpy(rng.integers(0, 3, (1, 3, 3))),
                torch.from_numpy(rng.integers(0, 4, (1, 3, 3))),
            )
            probe = [x, drv, lane][trial % 3]

            def fn():
                outputs = ModelOutputs(det=[x] + rest, drivable_logits=drv, lane_logits=lane)
                return total_loss(outputs, targets, TOY_ANCHORS, LossWeights())[0]

            check_gradient(fn, probe)
        _verdict(
            "4 gradient-suite",
            True,
            f"{self.N_FIXTURES} fixtures x 8 loss ops vs central differences (rel err < 1e-3)",
        )


class TestCriterion5OracleEquivalence:
    def test_nms_hungarian_ap_miou(self):
        from panoptiq.labelprep import INFEASIBLE, hungarian

        rng = np.random.default_rng(7)
        for trial in range(500):
            n = int(rng.integers(1, 201))
            cands = random_scored_boxes(rng, n)
            assert nms(cands, 0.25) == brute_force_nms(cands, 0.25), f"nms trial {trial}"

        for trial in range(500):
            r, v = int(rng.integers(0, 7)), int(rng.integers(0, 7))
            cost = rng.uniform(-5, 10, size=(r, v))
            if trial % 3 == 0:
                cost = np.where(rng.random((r, v)) < 0.35, INFEASIBLE, cost)
            result = hungarian(cost)
            cardinality, best_cost = brute_force_matching(np.asarray(cost, float).reshape(r, v))
            assert len(result.pairs) == cardinality, f"hungarian trial {trial}"
            assert abs(result.total_cost - best_cost) < 1e-9, f"hungarian trial {trial}"

        # hand-built AP fixture: TP(0.9), FP(0.8), TP(0.7) on 2 GT -> 5/6
        gts = [("a", BBox(0, 0, 10, 10, 1)), ("a", BBox(30, 30, 40, 40, 1))]
        preds = [
            ("a", BBox(0, 0, 10, 10, 1, 0.9)),
            ("a", BBox(60, 60, 70, 70, 1, 0.8)),
            ("a", BBox(30, 30, 40, 40, 1, 0.7)),
        ]
        ap = average_precision(preds, gts, 1)
        assert abs(ap - 5 / 6) <= 1e-9

        gt = np.zeros((10, 10), dtype=np.int64)
        gt[:5] = 1
        mean, per_class, _ = miou([(np.zeros_like(gt), gt)], 2)
        assert abs(per_class[0] - 0.5) <= 1e-9
        assert abs(per_class[1] - 0.0) <= 1e-9
        assert abs(mean - 0.25) <= 1e-9
        _verdict(
            "5 oracle-equivalence",
            True,
            "NMS 500/500 exact, Hungarian 500/500 cost-equal, AP/mIoU fixtures within 1e-9",
        )


class TestCriterion6QuantInvariants:
    def test_round_trip_ste_monotone(self):
        rng = np.random.default_rng(11)
        spec = QuantSpec(8, "asymmetric", "per-tensor", None, 0.037, 41)
        lo = (spec.qmin - 41) * 0.037
        hi = (spec.qmax - 41) * 0.037
        x = rng.uniform(lo, hi, size=1_000_000)
        err = np.abs(x - fake_quant_forward(x, spec))
        bound_ok = bool((err <= 0.037 / 2 + 1e-12).all())

        x2 = rng.uniform(lo * 3, hi * 3, size=1_000_000)
        g = rng.normal(0, 1, size=1_000_000)
        got = fake_quant_backward(g, x2, spec)
        mask_ok = bool(np.array_equal(got, g * ((x2 >= lo) & (x2 <= hi))))

        xs = np.sort(rng.normal(0, 5, size=1_000_000))
        mono_ok = bool((np.diff(quantize(xs, spec)) >= 0).all())
        _verdict(
            "6 quantization-invariants",
            bound_ok and mask_ok and mono_ok,
            f"round-trip<=scale/2: {bound_ok}, STE mask exact: {mask_ok}, monotone: {mono_ok}",
        )


class TestCriterion7Reparameterization:
    def test_fused_matches_unfused_100_inputs(self):
        model = build(NetworkConfig(), seed=17).eval()
        inputs = [
            torch.randn(1, 3, 96, 160, generator=torch.Generator().manual_seed(i))
            for i in range(100)
        ]
        with torch.no_grad():
            before = [model(x) for x in inputs]
        reparameterize(model)
        worst = 0.0
        with torch.no_grad():
            for x, ref in zip(inputs, before):
                out = model(x)
                for a, b in zip(
                    ref.det + [ref.drivable_logits, ref.lane_logits],
                    out.det + [out.drivable_logits, out.lane_logits],
                ):
                    worst = max(worst, float((a - b).abs().max()))
        _verdict(
            "7 reparameterization",
            worst < 1e-4,
            f"max |fused - unfused| over 100 inputs = {worst:.2e} (bound 1e-4)",
        )


class TestCriterion8Determinism:
    def test_two_full_runs_agree(self, toy_run, tmp_path_factory):
        root_b = tmp_path_factory.mktemp("acceptance_b")
        run_b = _run_toy_schedule(root_b, "runB")

        first_a = toy_run["logs"][0]["loss"]
        first_b = run_b["logs"][0]["loss"]
        epoch0_ok = first_a == first_b  # bit-identical floats

        def final_eval(logs):
            return [r["eval"] for r in logs if "eval" in r][-1]

        ev_a, ev_b = final_eval(toy_run["logs"]), final_eval(run_b["logs"])
        metrics_ok = all(abs(ev_a[k] - ev_b[k]) <= 1e-6 for k in ev_a)
        _verdict(
            "8 determinism",
            epoch0_ok and metrics_ok,
            f"epoch-0 losses bit-identical: {epoch0_ok}; "
            f"final metrics within 1e-6: {metrics_ok} ({ev_a} vs {ev_b})",
        )
