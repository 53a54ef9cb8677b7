"""Detection mAP@0.5 and segmentation mIoU, plus the whole-dataset report.

AP uses greedy score-ordered matching (each ground-truth box matched at most
once, IoU >= threshold, same class) and the all-point interpolated
precision-recall area by default. mIoU accumulates one global confusion
matrix over the dataset; classes absent from both prediction and truth score
a vacuous 1.0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import BBox, DET_CLASSES, PALETTES, SegMask, iou, merge_label_maps
from .postprocess import (
    InferenceConfig,
    decode_boxes,
    merge_segmentation,
    nms,
    run_heads,
    upsample_mask,
)


@dataclass
class EvalReport:
    map50: float
    ap_per_class: dict[str, float | None]
    drivable_miou: float
    lane_miou: float
    merged_miou: float
    drivable_iou_per_class: list[float]
    lane_iou_per_class: list[float]
    merged_iou_per_class: list[float]
    drivable_confusion: list[list[int]]
    lane_confusion: list[list[int]]
    n_images: int = 0

    def __post_init__(self):
        for name in ("map50", "drivable_miou", "lane_miou", "merged_miou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        return EvalReport(**json.loads(text))

    def format_table(self) -> str:
        """Plain-text summary table (one metric column per task)."""
        lines = [
            f"{'Metric':<34}{'Value':>8}",
            "-" * 42,
            f"{'Object Detection (mAP@0.5)':<34}{self.map50:>8.3f}",
            f"{'Drivable Area Segmentation (mIoU)':<34}{self.drivable_miou:>8.3f}",
            f"{'Lane Line Segmentation (mIoU)':<34}{self.lane_miou:>8.3f}",
            f"{'Merged Segmentation (mIoU)':<34}{self.merged_miou:>8.3f}",
        ]
        for name, ap in self.ap_per_class.items():
            shown = "absent" if ap is None else f"{ap:.3f}"
            lines.append(f"{'  AP ' + name:<34}{shown:>8}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Detection AP
# ---------------------------------------------------------------------------


def _match_class(
    preds: Sequence[tuple[str, BBox]],
    gts: Sequence[tuple[str, BBox]],
    iou_threshold: float,
) -> tuple[np.ndarray, int]:
    """Greedy matching for one class: TP flags in descending score order."""
    order = sorted(range(len(preds)), key=lambda i: (-(preds[i][1].score or 0.0), i))
    gt_by_image: dict[str, list[BBox]] = {}
    for img_id, g in gts:
        gt_by_image.setdefault(img_id, []).append(g)
    used: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gt_by_image.items()}

    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        img_id, p = preds[i]
        cands = gt_by_image.get(img_id, [])
        best, best_j = 0.0, -1
        for j, g in enumerate(cands):
            if used[img_id][j]:
                continue
            v = iou(p, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            used[img_id][best_j] = True
            tp[rank] = True
    return tp, len(gts)


def _ap_from_tp(tp: np.ndarray, n_gt: int, interpolation: str) -> float:
    if n_gt == 0:
        return 0.0
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    recall = cum_tp / n_gt
    if interpolation == "11point":
        levels = np.linspace(0.0, 1.0, 11)
        vals = [precision[recall >= r].max() if np.any(recall >= r) else 0.0 for r in levels]
        return float(np.mean(vals))
    # all-point: integrate the precision envelope over recall
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[1.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(np.diff(mrec))[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def average_precision(
    preds: Sequence[tuple[str, BBox]],
    gts: Sequence[tuple[str, BBox]],
    class_id: int,
    iou_threshold: float = 0.5,
    interpolation: str = "all",
) -> float | None:
    """AP for one class over a dataset; None when the class has no ground
    truth (excluded from the mean)."""
    cls_preds = [(i, b) for i, b in preds if b.class_id == class_id]
    cls_gts = [(i, b) for i, b in gts if b.class_id == class_id]
    if not cls_gts:
        return None
    tp, n_gt = _match_class(cls_preds, cls_gts, iou_threshold)
    return _ap_from_tp(tp, n_gt, interpolation)


def map50(
    preds_by_image: Mapping[str, Sequence[BBox]],
    gts_by_image: Mapping[str, Sequence[BBox]],
    iou_threshold: float = 0.5,
    interpolation: str = "all",
) -> tuple[float, dict[str, float | None]]:
    """Mean of defined per-class APs over the detection classes."""
    preds = [(i, b) for i, boxes in preds_by_image.items() for b in boxes]
    gts = [(i, b) for i, boxes in gts_by_image.items() for b in boxes]
    per_class: dict[str, float | None] = {}
    defined = []
    for cid, name in enumerate(DET_CLASSES):
        ap = average_precision(preds, gts, cid, iou_threshold, interpolation)
        per_class[name] = ap
        if ap is not None:
            defined.append(ap)
    mean = float(np.mean(defined)) if defined else 0.0
    return mean, per_class


# ---------------------------------------------------------------------------
# Segmentation mIoU
# ---------------------------------------------------------------------------


def confusion_matrix(
    pairs: Iterable[tuple[np.ndarray, np.ndarray]], num_classes: int
) -> np.ndarray:
    """Global confusion matrix: rows = ground truth, cols = prediction."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, gt in pairs:
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
        idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
        cm += np.bincount(idx, minlength=num_classes * num_classes).reshape(
            num_classes, num_classes
        )
    return cm


def miou_from_confusion(cm: np.ndarray, include_background: bool = True):
    """Per-class IoU from a confusion matrix; absent classes count 1.0."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.where(denom > 0, tp / np.maximum(denom, 1), 1.0)
    sel = per_class if include_background else per_class[1:]
    return float(sel.mean()), per_class


def miou(
    pairs: Iterable[tuple[np.ndarray | SegMask, np.ndarray | SegMask]],
    num_classes: int,
    include_background: bool = True,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Dataset mIoU: (mean, per-class vector, confusion matrix)."""
    raw = [
        (
            p.class_map if isinstance(p, SegMask) else p,
            g.class_map if isinstance(g, SegMask) else g,
        )
        for p, g in pairs
    ]
    cm = confusion_matrix(raw, num_classes)
    mean, per_class = miou_from_confusion(cm, include_background)
    return mean, per_class, cm


# ---------------------------------------------------------------------------
# Whole-model evaluation
# ---------------------------------------------------------------------------


@dataclass
class _SegAccumulator:
    num_classes: int
    cm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.cm = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        self.cm += confusion_matrix([(pred, gt)], self.num_classes)


def evaluate_model(model, samples, inference_cfg: InferenceConfig | None = None) -> EvalReport:
    """Run inference over samples and score all three tasks.

    Per-task masks are scored from each head's argmax at the sample's own
    resolution; the merged mask applies the lane-overwrites-drivable rule to
    both prediction and ground truth.
    """
    cfg = inference_cfg or InferenceConfig()
    preds_by_image: dict[str, list[BBox]] = {}
    gts_by_image: dict[str, list[BBox]] = {}
    acc = {
        "drivable": _SegAccumulator(len(PALETTES["drivable"])),
        "lane": _SegAccumulator(len(PALETTES["lane"])),
        "merged": _SegAccumulator(len(PALETTES["merged"])),
    }

    n = 0
    for sample in samples:
        if hasattr(sample, "load"):
            sample = sample.load()
        n += 1
        h0, w0 = sample.size
        h_net, w_net = model.config.input_size
        det, drv_logits, lane_logits = run_heads(model, sample.image)

        candidates = decode_boxes(det, model.config.anchor_set, cfg.conf_threshold, (h_net, w_net))
        sx, sy = w0 / w_net, h0 / h_net
        boxes = []
        for b in nms(candidates, cfg.nms_iou):
            kept = BBox(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy, b.class_id, b.score).clip(w0, h0)
            if kept is not None:
                boxes.append(kept)
        preds_by_image[sample.source_id] = boxes
        gts_by_image[sample.source_id] = list(sample.boxes)

        size = sample.size
        drv_pred = upsample_mask(
            SegMask(drv_logits.argmax(-1).astype(np.uint8), "drivable"), size
        )
        lane_pred = upsample_mask(
            SegMask(lane_logits.argmax(-1).astype(np.uint8), "lane"), size
        )
        merged_pred = upsample_mask(merge_segmentation(drv_logits, lane_logits), size)
        acc["drivable"].add(drv_pred.class_map, sample.drivable.class_map)
        acc["lane"].add(lane_pred.class_map, sample.lane.class_map)
        merged_gt = merge_label_maps(sample.drivable.class_map, sample.lane.class_map)
        acc["merged"].add(merged_pred.class_map, merged_gt)

    mean_ap, per_class = map50(preds_by_image, gts_by_image)
    drv_m, drv_pc = miou_from_confusion(acc["drivable"].cm)
    lane_m, lane_pc = miou_from_confusion(acc["lane"].cm)
    merged_m, merged_pc = miou_from_confusion(acc["merged"].cm)
    return EvalReport(
        map50=mean_ap,
        ap_per_class=per_class,
        drivable_miou=drv_m,
        lane_miou=lane_m,
        merged_miou=merged_m,
        drivable_iou_per_class=[float(v) for v in drv_pc],
        lane_iou_per_class=[float(v) for v in lane_pc],
        merged_iou_per_class=[float(v) for v in merged_pc],
        drivable_confusion=acc["drivable"].cm.tolist(),
        lane_confusion=acc["lane"].cm.tolist(),
        n_images=n,
    )


def save_report(report: EvalReport, out_dir: str | Path, stem: str = "eval") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}_report.json"
    json_path.write_text(report.to_json() + "\n")
    table_path = out_dir / f"{stem}_table.txt"
    table_path.write_text(report.format_table() + "\n")
    return json_path, table_path
