"""Command-line entry point.

Subcommands: prepare, toygen, train, quantize, eval, infer, report. Every
command validates its inputs first, writes only under --out, and exits
nonzero with a single-line machine-parsable error on failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import evaluation, labelprep, postprocess, quantization, toyset, trainer
from .data import PALETTES, load_image, load_manifest, save_mask
from .network import build

# Rendering colors for the optional inference overlay, one per merged class.
_OVERLAY_COLORS = np.array(
    [
        [0, 0, 0],        # background: untouched
        [0, 200, 80],     # main lane
        [220, 60, 60],    # alternative lane
        [120, 200, 255],  # single line
        [250, 220, 80],   # double line
        [230, 120, 230],  # dashed line
    ],
    dtype=np.float32,
) / 255.0


def _fail(exc: BaseException) -> int:
    line = json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}})
    print(line, file=sys.stderr)
    return 1


def _load_run_config(args) -> config_mod.RunConfig:
    if getattr(args, "config", None):
        cfg = config_mod.load_config(args.config)
    else:
        cfg = config_mod.make_preset(args.preset or "toy", base_dir=Path.cwd())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_prepare(args) -> int:
    out = Path(args.out)
    manifest = labelprep.prepare_dataset(args.source, out)
    print(manifest)
    return 0


def cmd_toygen(args) -> int:
    spec = toyset.SceneSpec(
        seed=args.seed if args.seed is not None else 0,
        n_images=args.n_images,
        image_size=tuple(args.image_size),
        objects_per_image=tuple(args.objects),
    )
    manifest = toyset.generate(spec, Path(args.out))
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    schedule = cfg.to_schedule()
    if args.dry_run:
        # Validate config, build the model, take a single optimizer step.
        stage = schedule.stages[0]
        records = load_manifest(stage.datasets[0])
        samples = [r.load() for r in records[: stage.batch_size]]
        model = build(cfg.network, cfg.seed)
        one_step = dataclasses.replace(
            stage, epochs=1, warmup_epochs=0, mosaic=False, batch_size=len(samples)
        )
        trainer.run_stage(model, one_step, schedule, 0, train_samples=samples)
        print(json.dumps({"dry_run": "ok", "stage": stage.name, "steps": 1}))
        return 0
    model, logs, checkpoints = trainer.run_schedule(schedule, out)
    print(json.dumps({"checkpoints": [str(p) for p in checkpoints], "epochs": len(logs)}))
    return 0


def cmd_quantize(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = quantization.load_model(args.checkpoint)
    if args.mode == "ptq":
        if not args.calibration:
            raise ValueError("ptq mode requires --calibration with a manifest")
        import torch

        from .augment import normalize

        records = load_manifest(args.calibration)
        batches = []
        for r in records[: args.calibration_limit]:
            s = r.load()
            x = normalize(s.image)
            batches.append(torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))[None]))
        specs = quantization.calibrate_ptq(model, batches)
    else:  # qat-export
        if model.input_fq is None:
            raise ValueError("checkpoint has no QAT state; run the qat stage or use ptq mode")
        specs = quantization.collect_specs(model)
    archive = quantization.export_int8(model, specs, out / "model_int8.zip")
    print(archive)
    return 0


def cmd_eval(args) -> int:
    model = quantization.load_model(args.model)
    records = load_manifest(args.manifest)
    report = evaluation.evaluate_model(model, records)
    out = Path(args.out)
    json_path, table_path = evaluation.save_report(report, out)
    print(json.dumps({"report": str(json_path), "table": str(table_path)}))
    return 0


def cmd_infer(args) -> int:
    model = quantization.load_model(args.model)
    cfg = postprocess.InferenceConfig(
        nms_iou=args.nms_iou, conf_threshold=args.conf_threshold
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_path in args.images:
        image = load_image(image_path)
        boxes, mask = postprocess.infer(model, image, cfg)
        stem = Path(image_path).stem
        doc = {
            "boxes": [
                {"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2,
                 "class": b.class_id, "score": b.score}
                for b in boxes
            ]
        }
        (out / f"{stem}.json").write_text(json.dumps(doc, indent=1) + "\n")
        save_mask(mask, out / f"{stem}_mask.png")
        if args.overlay:
            _write_overlay(image, mask.class_map, boxes, out / f"{stem}_overlay.png")
    print(json.dumps({"images": len(args.images), "out": str(out)}))
    return 0


def _write_overlay(image, class_map, boxes, path) -> None:
    from .data import save_image

    overlay = image.copy()
    for label in range(1, len(PALETTES["merged"])):
        sel = class_map == label
        overlay[sel] = 0.45 * overlay[sel] + 0.55 * _OVERLAY_COLORS[label]
    h, w = class_map.shape
    for b in boxes:
        x1, y1 = max(int(b.x1), 0), max(int(b.y1), 0)
        x2, y2 = min(int(b.x2), w - 1), min(int(b.y2), h - 1)
        overlay[y1:y2 + 1, [x1, x2]] = (1.0, 1.0, 1.0)
        overlay[[y1, y2], x1:x2 + 1] = (1.0, 1.0, 1.0)
    save_image(overlay, path)


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = []
    for log_file in args.logs:
        with open(log_file) as f:
            records.extend(json.loads(line) for line in f if line.strip())
    if not records:
        raise ValueError("no log records found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    xs = range(len(records))
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for key in ("total", "det", "seg_da", "seg_ll"):
        ax.plot(xs, [r["loss"].get(key, float("nan")) for r in records], label=key)
    bounds = [i for i in xs if i and records[i]["stage"] != records[i - 1]["stage"]]
    for b in bounds:
        ax.axvline(b, color="gray", lw=0.5, ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)
    plt.close(fig)

    evals = [(i, r["eval"]) for i, r in enumerate(records) if "eval" in r]
    if evals:
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for key in ("map50", "drivable_miou", "lane_miou", "merged_miou"):
            ax.plot([i for i, _ in evals], [e[key] for _, e in evals], label=key)
        for b in bounds:
            ax.axvline(b, color="gray", lw=0.5, ls="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("metric")
        ax.set_ylim(0, 1.02)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "metric_curves.png", dpi=120)
        plt.close(fig)
    print(json.dumps({"plots": str(out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panoptiq",
        description="Toy-scale quantization-aware multi-task road perception pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="convert source annotations into a manifest")
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("toygen", help="generate the synthetic toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=int, default=64)
    p.add_argument("--image-size", type=int, nargs=2, default=(96, 160), metavar=("H", "W"))
    p.add_argument("--objects", type=int, nargs=2, default=(1, 4), metavar=("MIN", "MAX"))
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--config")
    p.add_argument("--preset", choices=config_mod.PRESETS)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="PTQ-calibrate or export a QAT checkpoint to INT8")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("ptq", "qat-export"), required=True)
    p.add_argument("--calibration", help="manifest of calibration images (ptq mode)")
    p.add_argument("--calibration-limit", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="evaluate a checkpoint or INT8 archive on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run inference on images")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nms-iou", type=float, default=0.25)
    p.add_argument("--conf-threshold", type=float, default=0.05)
    p.add_argument("--overlay", action="store_true")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="plot loss/metric curves from training logs")
    p.add_argument("--out", required=True)
    p.add_argument("logs", nargs="+")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
