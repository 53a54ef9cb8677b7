"""Raw model outputs -> final predictions.

Box decoding + confidence filter + class-wise greedy NMS for detection;
bilinear logit upsampling, per-head argmax and the lane-overwrites-drivable
merge for segmentation; nearest-neighbor label upsampling back to the
original resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
import torch

from .augment import normalize
from .data import BBox, DetPrediction, SegMask, iou, merge_label_maps
from .network import AnchorSet, PerceptionNet


@dataclass(frozen=True)
class InferenceConfig:
    nms_iou: float = 0.25
    conf_threshold: float = 0.05
    output_size: tuple[int, int] | None = None  # (H, W); None keeps the input size

    def __post_init__(self):
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in [0, 1]")
        if self.conf_threshold < 0.0:
            raise ValueError("conf_threshold must be >= 0")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def encode_box(
    box: BBox, cell: tuple[int, int], anchor: tuple[float, float], stride: int
) -> np.ndarray:
    """Inverse of the decode transform, for round-trip tests.

    Returns the four raw logits that decode back to ``box`` at the given
    (cell, anchor). The box center must lie within the decodable window of
    the cell and the size within (0, 4) anchor ratios.
    """
    cx, cy = box.center
    fx, fy = cx / stride - cell[0], cy / stride - cell[1]
    sx, sy = (fx + 0.5) / 2.0, (fy + 0.5) / 2.0
    rw = math.sqrt(box.width / anchor[0]) / 2.0
    rh = math.sqrt(box.height / anchor[1]) / 2.0
    vals = np.array([sx, sy, rw, rh])
    if np.any(vals <= 0.0) or np.any(vals >= 1.0):
        raise ValueError("box is not representable at this cell/anchor")
    return np.log(vals / (1.0 - vals))


def decode_boxes(
    det: DetPrediction,
    anchors: AnchorSet,
    conf_threshold: float,
    image_size: tuple[int, int],
) -> list[BBox]:
    """Grids -> scored candidate boxes, clamped to the image.

    Score is ``sigmoid(objectness) * max_c sigmoid(class_c)``; candidates
    below the confidence threshold are dropped before NMS.
    """
    h_img, w_img = image_size
    out: list[BBox] = []
    for si, grid in enumerate(det.grids):
        stride = det.strides[si]
        gh, gw, na, _ = grid.shape
        obj = _sigmoid(grid[..., 4])
        cls = _sigmoid(grid[..., 5:])
        best_cls = cls.max(axis=-1)
        score = obj * best_cls
        keep = score >= conf_threshold
        if not keep.any():
            continue
        ys, xs, ans = np.nonzero(keep)
        sel = grid[ys, xs, ans]
        anchor_wh = np.asarray(anchors.per_scale(si), dtype=np.float64)[ans]
        cxy = (2.0 * _sigmoid(sel[:, :2]) - 0.5 + np.stack([xs, ys], axis=1)) * stride
        wh = (2.0 * _sigmoid(sel[:, 2:4])) ** 2 * anchor_wh
        cls_id = cls[ys, xs, ans].argmax(axis=-1)
        sc = score[ys, xs, ans]
        x1 = cxy[:, 0] - wh[:, 0] / 2.0
        y1 = cxy[:, 1] - wh[:, 1] / 2.0
        x2 = cxy[:, 0] + wh[:, 0] / 2.0
        y2 = cxy[:, 1] + wh[:, 1] / 2.0
        for i in range(len(sc)):
            if x2[i] - x1[i] <= 1e-6 or y2[i] - y1[i] <= 1e-6:
                continue  # size underflowed to a degenerate sliver
            b = BBox(
                float(x1[i]), float(y1[i]), float(x2[i]), float(y2[i]),
                int(cls_id[i]), float(min(sc[i], 1.0)),
            ).clip(w_img, h_img)
            if b is not None:
                out.append(b)
    return out


def nms(candidates: list[BBox], iou_threshold: float) -> list[BBox]:
    """Greedy class-wise suppression.

    Candidates are visited in descending score order (ties broken by smaller
    original index); one is kept iff its IoU with every already-kept box of
    the same class is <= the threshold.
    """
    order = sorted(range(len(candidates)), key=lambda i: (-(candidates[i].score or 0.0), i))
    kept: list[BBox] = []
    for i in order:
        b = candidates[i]
        if all(iou(b, k) <= iou_threshold for k in kept if k.class_id == b.class_id):
            kept.append(b)
    return kept


def merge_segmentation(drivable_logits: np.ndarray, lane_logits: np.ndarray) -> SegMask:
    """Per-head argmax, then lane labels overwrite drivable ones."""
    if drivable_logits.shape[:2] != lane_logits.shape[:2]:
        raise ValueError(
            f"spatial shapes differ: {drivable_logits.shape[:2]} vs {lane_logits.shape[:2]}"
        )
    drivable = drivable_logits.argmax(axis=-1).astype(np.uint8)
    lane = lane_logits.argmax(axis=-1).astype(np.uint8)
    return SegMask(merge_label_maps(drivable, lane), "merged")


def upsample_mask(mask: SegMask, target: tuple[int, int]) -> SegMask:
    """Nearest-neighbor (pixel-center) label upsampling; exact block
    replication for integer ratios."""
    th, tw = target
    h, w = mask.shape
    if (th, tw) == (h, w):
        return mask
    rows = ((2 * np.arange(th) + 1) * h) // (2 * th)
    cols = ((2 * np.arange(tw) + 1) * w) // (2 * tw)
    return SegMask(np.ascontiguousarray(mask.class_map[rows][:, cols]), mask.palette)


def upsample_logits(logits: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear (half-pixel aligned) upsampling of a (h, w, C) logit map."""
    th, tw = target
    if logits.shape[:2] == (th, tw):
        return logits
    return cv2.resize(logits.astype(np.float32), (tw, th), interpolation=cv2.INTER_LINEAR)


def _to_det_prediction(outputs, index: int, strides: tuple[int, ...]) -> DetPrediction:
    grids = tuple(g[index].detach().cpu().numpy() for g in outputs.det)
    return DetPrediction(grids=grids, strides=strides)


def run_heads(
    model: PerceptionNet, image: np.ndarray
) -> tuple[DetPrediction, np.ndarray, np.ndarray]:
    """Resize + normalize + forward one image; returns per-head raw outputs
    at network resolution (segmentation logits bilinearly upsampled to the
    network input size)."""
    h_net, w_net = model.config.input_size
    resized = image
    if image.shape[:2] != (h_net, w_net):
        resized = cv2.resize(
            image.astype(np.float32), (w_net, h_net), interpolation=cv2.INTER_LINEAR
        )
    x = normalize(resized)
    batch = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))[None])
    was_training = model.training
    model.eval()
    with torch.no_grad():
        outputs = model(batch)
    if was_training:
        model.train()
    det = _to_det_prediction(outputs, 0, model.config.strides)
    drv = upsample_logits(outputs.drivable_logits[0].numpy(), (h_net, w_net))
    lane = upsample_logits(outputs.lane_logits[0].numpy(), (h_net, w_net))
    return det, drv, lane


def infer(
    model: PerceptionNet, image: np.ndarray, cfg: InferenceConfig
) -> tuple[list[BBox], SegMask]:
    """Full single-image pipeline: resize, normalize, forward, decode + NMS,
    merge, upsample. Boxes come back in original-image coordinates."""
    h0, w0 = image.shape[:2]
    h_net, w_net = model.config.input_size
    det, drv_logits, lane_logits = run_heads(model, image)
    candidates = decode_boxes(det, model.config.anchor_set, cfg.conf_threshold, (h_net, w_net))
    boxes = nms(candidates, cfg.nms_iou)
    sx, sy = w0 / w_net, h0 / h_net
    rescaled = []
    for b in boxes:
        moved = BBox(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy, b.class_id, b.score)
        kept = moved.clip(w0, h0)
        if kept is not None:
            rescaled.append(kept)
    merged = merge_segmentation(drv_logits, lane_logits)
    out_size = cfg.output_size or (h0, w0)
    return rescaled, upsample_mask(merged, out_size)
