#!/usr/bin/env python3
"""End-to-end toy experiment: generate data, train all four stages, export
INT8 both ways (PTQ and QAT), evaluate everything, and plot curves.

    python3 scripts/run_toy_pipeline.py --out runs/toy [--seed 0]

Expect roughly 5-10 minutes on a desktop CPU.
"""
import argparse
import json
from pathlib import Path

from panoptiq.cli import main as cli


def sh(args):
    rc = cli([str(a) for a in args])
    if rc != 0:
        raise SystemExit(f"command failed: {args}")


def run(out: Path, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sh(["toygen", "--out", out / "data" / "train", "--seed", seed, "--n-images", 64])
    sh(["toygen", "--out", out / "data" / "extra", "--seed", seed + 101, "--n-images", 32])
    sh(["toygen", "--out", out / "data" / "val", "--seed", seed + 202, "--n-images", 16])

    config = {"seed": seed, "schedule": {"eval_every": 5}}
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(config, indent=1))
    # preset stage list + the overrides above; paths resolve against --out
    from panoptiq.config import make_preset

    cfg = make_preset("toy", base_dir=out)
    cfg.seed = seed
    cfg.eval_every = 5
    full = cfg.to_dict()
    cfg_path.write_text(json.dumps(full, indent=1))

    sh(["train", "--config", cfg_path, "--out", out / "run"])
    finetune_ckpt = out / "run" / "stage2_finetune.ckpt.zip"
    qat_ckpt = out / "run" / "stage3_qat.ckpt.zip"

    sh(["quantize", "--checkpoint", finetune_ckpt, "--mode", "ptq",
        "--calibration", out / "data" / "train" / "manifest.json",
        "--out", out / "ptq"])
    sh(["quantize", "--checkpoint", qat_ckpt, "--mode", "qat-export",
        "--out", out / "qat"])

    val = out / "data" / "val" / "manifest.json"
    sh(["eval", "--model", finetune_ckpt, "--manifest", val, "--out", out / "eval_float"])
    sh(["eval", "--model", out / "ptq" / "model_int8.zip", "--manifest", val,
        "--out", out / "eval_ptq"])
    sh(["eval", "--model", out / "qat" / "model_int8.zip", "--manifest", val,
        "--out", out / "eval_qat"])
    sh(["report", "--out", out / "plots", out / "run" / "train_log.jsonl"])

    print("\n=== float32 (after finetune) ===")
    print((out / "eval_float" / "eval_table.txt").read_text())
    print("=== PTQ int8 ===")
    print((out / "eval_ptq" / "eval_table.txt").read_text())
    print("=== QAT int8 ===")
    print((out / "eval_qat" / "eval_table.txt").read_text())


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/toy"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    run(args.out, args.seed)
