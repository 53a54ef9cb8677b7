#!/usr/bin/env python3
"""Print the float32 / PTQ / QAT comparison table from a finished toy run.

    python3 scripts/quant_comparison.py --run runs/toy
"""
import argparse
import json
from pathlib import Path


def main(run_dir: Path) -> None:
    rows = []
    for label, sub in (("original (fp32)", "eval_float"),
                       ("PTQ (int8)", "eval_ptq"),
                       ("QAT (int8)", "eval_qat")):
        doc = json.loads((run_dir / sub / "eval_report.json").read_text())
        rows.append((label, doc["map50"], doc["drivable_miou"], doc["lane_miou"]))

    print(f"{'Model':<18}{'mAP@0.5':>10}{'Drivable mIoU':>16}{'Lane mIoU':>12}")
    print("-" * 56)
    for label, m, d, l in rows:
        print(f"{label:<18}{m:>10.3f}{d:>16.3f}{l:>12.3f}")

    int8 = run_dir / "qat" / "model_int8.zip"
    ckpt = run_dir / "run" / "stage2_finetune.ckpt.zip"
    if int8.exists() and ckpt.exists():
        print(f"\nmodel size: fp32 {ckpt.stat().st_size / 1e6:.2f} MB, "
              f"int8 {int8.stat().st_size / 1e6:.2f} MB "
              f"(ratio {int8.stat().st_size / ckpt.stat().st_size:.3f})")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run", type=Path, default=Path("runs/toy"))
    main(ap.parse_args().run)
