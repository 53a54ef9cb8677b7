"""Loss components and the composite multi-task objectives.

Detection = weighted focal (class, objectness) + smooth-L1 (boxes) on targets
assigned YOLO-style to anchor cells; lane segmentation = Tversky + focal +
Jaccard; drivable segmentation = Tversky + focal; the total objective is a
weighted sum of the three task losses.

Box encoding: a prediction at cell (cx, cy) with anchor (aw, ah) decodes as
``center = (2*sigmoid(txy) - 0.5 + cell) * stride`` and
``size = (2*sigmoid(twh))^2 * anchor``. The smooth-L1 box loss compares the
decoded values in grid-normalized space (cell offsets and anchor ratios).
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from .data import BBox
from .network import AnchorSet, ModelOutputs

#: Anchor/box shape compatibility bound: max side ratio must stay below this.
RATIO_THRESHOLD = 4.0

_SMOOTH = 1.0  # soft-count smoothing for Tversky/Jaccard


@dataclass(frozen=True)
class LossWeights:
    """Balancing coefficients for all loss terms.

    The first eleven fields are the composite-objective weights; the
    remaining fields parameterize the individual terms (focal focusing/
    balance, Tversky false-positive/false-negative trade-off, objectness
    target style).
    """

    alpha1: float = 0.5   # detection: class
    alpha2: float = 1.0   # detection: objectness
    alpha3: float = 0.05  # detection: box
    beta1: float = 1.0    # lane: Tversky
    beta2: float = 1.0    # lane: focal
    beta3: float = 1.0    # lane: Jaccard
    gamma1: float = 0.2   # drivable: Tversky
    gamma2: float = 0.2   # drivable: focal
    delta1: float = 1.0   # total: detection
    delta2: float = 1.0   # total: drivable
    delta3: float = 1.0   # total: lane
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    tversky_alpha: float = 0.7
    tversky_beta: float = 0.3
    obj_iou_weighted: bool = False

    def __post_init__(self):
        for f in fields(self):
            if f.type == "float" and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass(frozen=True)
class ScaleTargets:
    """Matched (cell, anchor) entries for one detection scale."""

    cell_x: np.ndarray
    cell_y: np.ndarray
    anchor: np.ndarray
    txy: np.ndarray  # (n, 2) center offsets within the cell, in (-0.5, 1.5)
    twh: np.ndarray  # (n, 2) size / anchor ratios, in (0, RATIO_THRESHOLD)
    cls: np.ndarray

    def __len__(self) -> int:
        return len(self.cell_x)


@dataclass(frozen=True)
class AssignedTargets:
    scales: tuple[ScaleTargets, ...]
    unassigned: tuple[int, ...]  # indices of GT boxes no anchor accepted


def assign_targets(
    boxes: list[BBox] | tuple[BBox, ...],
    anchors: AnchorSet,
    grid_shapes: list[tuple[int, int]],
    ratio_threshold: float = RATIO_THRESHOLD,
) -> AssignedTargets:
    """Assign ground-truth boxes to anchor cells.

    A box matches anchor ``a`` at its center cell plus the two nearest
    neighbor cells iff ``max(w/aw, aw/w, h/ah, ah/h) < ratio_threshold``.
    Boxes no anchor accepts are reported in ``unassigned``.
    """
    per_scale: list[list[list]] = [[[] for _ in range(6)] for _ in grid_shapes]
    unassigned = []
    for gi, b in enumerate(boxes):
        cx, cy = b.center
        w, h = b.width, b.height
        matched = False
        for si, stride in enumerate(anchors.strides):
            gh, gw = grid_shapes[si]
            fx, fy = cx / stride, cy / stride
            base_x = min(int(fx), gw - 1)
            base_y = min(int(fy), gh - 1)
            dx = -1 if (fx - base_x) < 0.5 else 1
            dy = -1 if (fy - base_y) < 0.5 else 1
            cells = [(base_x, base_y)]
            if 0 <= base_x + dx < gw:
                cells.append((base_x + dx, base_y))
            if 0 <= base_y + dy < gh:
                cells.append((base_x, base_y + dy))
            for ai, (aw, ah) in enumerate(anchors.per_scale(si)):
                ratio = max(w / aw, aw / w, h / ah, ah / h)
                if ratio >= ratio_threshold:
                    continue
                matched = True
                for (ix, iy) in cells:
                    off_x, off_y = fx - ix, fy - iy
                    if not (-0.5 < off_x < 1.5 and -0.5 < off_y < 1.5):
                        continue
                    rows = per_scale[si]
                    rows[0].append(ix)
                    rows[1].append(iy)
                    rows[2].append(ai)
                    rows[3].append((off_x, off_y))
                    rows[4].append((w / aw, h / ah))
                    rows[5].append(b.class_id)
        if not matched:
            unassigned.append(gi)

    scales = []
    for rows in per_scale:
        scales.append(
            ScaleTargets(
                cell_x=np.asarray(rows[0], dtype=np.int64),
                cell_y=np.asarray(rows[1], dtype=np.int64),
                anchor=np.asarray(rows[2], dtype=np.int64),
                txy=np.asarray(rows[3], dtype=np.float32).reshape(-1, 2),
                twh=np.asarray(rows[4], dtype=np.float32).reshape(-1, 2),
                cls=np.asarray(rows[5], dtype=np.int64),
            )
        )
    return AssignedTargets(scales=tuple(scales), unassigned=tuple(unassigned))


# ---------------------------------------------------------------------------
# Elementary losses
# ---------------------------------------------------------------------------


def _zero_like_graph(t: torch.Tensor) -> torch.Tensor:
    return t.sum() * 0.0


def focal_loss(
    pred_logits: torch.Tensor,
    targets: torch.Tensor,
    gamma: float = 2.0,
    alpha_bal: float = 0.25,
) -> torch.Tensor:
    """Mean of ``-alpha_t * (1 - p_t)^gamma * log(p_t)`` over all elements.

    ``p_t`` is the sigmoid probability of the true outcome; targets may be
    soft. Reduces to alpha-balanced binary cross-entropy at ``gamma = 0``.
    """
    if pred_logits.numel() == 0:
        return _zero_like_graph(pred_logits)
    t = targets.to(pred_logits.dtype)
    ce = F.binary_cross_entropy_with_logits(pred_logits, t, reduction="none")
    p = torch.sigmoid(pred_logits)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = alpha_bal * t + (1.0 - alpha_bal) * (1.0 - t)
    return (alpha_t * (1.0 - p_t).clamp(min=0.0) ** gamma * ce).mean()


def box_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean smooth-L1 over the four encoded coordinates; 0 on empty input."""
    if pred.numel() == 0:
        return _zero_like_graph(pred)
    d = (pred - target.to(pred.dtype)).abs()
    return torch.where(d < 1.0, 0.5 * d * d, d - 0.5).mean()


def _soft_counts(pred_probs: torch.Tensor, target_mask: torch.Tensor):
    n_classes = pred_probs.shape[-1]
    y = F.one_hot(target_mask.long(), n_classes).to(pred_probs.dtype)
    dims = tuple(range(pred_probs.ndim - 1))
    tp = (pred_probs * y).sum(dims)
    fp = (pred_probs * (1.0 - y)).sum(dims)
    fn = ((1.0 - pred_probs) * y).sum(dims)
    return tp, fp, fn, y, dims


def tversky_loss(
    pred_probs: torch.Tensor,
    target_mask: torch.Tensor,
    alpha_tv: float = 0.7,
    beta_tv: float = 0.3,
) -> torch.Tensor:
    """``1 - TP/(TP + a*FP + b*FN)`` with soft counts, foreground classes only."""
    tp, fp, fn, _, _ = _soft_counts(pred_probs, target_mask)
    index = (tp + _SMOOTH) / (tp + alpha_tv * fp + beta_tv * fn + _SMOOTH)
    return (1.0 - index[1:]).mean()


def jaccard_loss(pred_probs: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """``1 - soft IoU`` averaged over all classes."""
    tp, _, _, y, dims = _soft_counts(pred_probs, target_mask)
    union = pred_probs.sum(dims) + y.sum(dims) - tp
    return (1.0 - (tp + _SMOOTH) / (union + _SMOOTH)).mean()


# ---------------------------------------------------------------------------
# Composite objectives
# ---------------------------------------------------------------------------


def _grid_box_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """IoU between center-form boxes given as (n, 4) [cx, cy, w, h] rows."""
    px1 = pred[:, 0] - pred[:, 2] / 2
    py1 = pred[:, 1] - pred[:, 3] / 2
    px2 = pred[:, 0] + pred[:, 2] / 2
    py2 = pred[:, 1] + pred[:, 3] / 2
    tx1 = target[:, 0] - target[:, 2] / 2
    ty1 = target[:, 1] - target[:, 3] / 2
    tx2 = target[:, 0] + target[:, 2] / 2
    ty2 = target[:, 1] + target[:, 3] / 2
    iw = (torch.minimum(px2, tx2) - torch.maximum(px1, tx1)).clamp(min=0)
    ih = (torch.minimum(py2, ty2) - torch.maximum(py1, ty1)).clamp(min=0)
    inter = iw * ih
    union = pred[:, 2] * pred[:, 3] + target[:, 2] * target[:, 3] - inter
    return inter / union.clamp(min=1e-9)


def det_loss(
    det_grids: list[torch.Tensor],
    assigned: list[AssignedTargets],
    anchors: AnchorSet,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """``alpha1*L_class + alpha2*L_obj + alpha3*L_box`` with components."""
    num_classes = det_grids[0].shape[-1] - 5
    device = det_grids[0].device
    dtype = det_grids[0].dtype

    obj_logits, obj_targets = [], []
    cls_logits, cls_targets = [], []
    box_preds, box_tgts = [], []

    for si, grid in enumerate(det_grids):
        bsz = grid.shape[0]
        obj_tgt = torch.zeros(grid.shape[:4], dtype=dtype, device=device)
        anchor_wh = torch.tensor(anchors.per_scale(si), dtype=dtype, device=device)
        stride = float(anchors.strides[si])
        for b in range(bsz):
            st = assigned[b].scales[si]
            if len(st) == 0:
                continue
            iy = torch.from_numpy(st.cell_y).to(device)
            ix = torch.from_numpy(st.cell_x).to(device)
            ia = torch.from_numpy(st.anchor).to(device)
            sel = grid[b, iy, ix, ia]  # (n, 5+C)
            pxy = 2.0 * torch.sigmoid(sel[:, :2]) - 0.5
            pwh = (2.0 * torch.sigmoid(sel[:, 2:4])) ** 2
            t_xy = torch.from_numpy(st.txy).to(device=device, dtype=dtype)
            t_wh = torch.from_numpy(st.twh).to(device=device, dtype=dtype)
            box_preds.append(torch.cat([pxy, pwh], dim=1))
            box_tgts.append(torch.cat([t_xy, t_wh], dim=1))
            cls_logits.append(sel[:, 5:])
            cls_targets.append(
                F.one_hot(torch.from_numpy(st.cls).to(device), num_classes).to(dtype)
            )
            if weights.obj_iou_weighted:
                # Compare in input-pixel units so both scales agree.
                awh = anchor_wh[ia]
                pb = torch.cat([pxy * stride, pwh * awh], dim=1)
                tb = torch.cat([t_xy * stride, t_wh * awh], dim=1)
                obj_val = _grid_box_iou(pb, tb).detach().clamp(0.0, 1.0).to(dtype)
            else:
                obj_val = torch.ones(len(st), dtype=dtype, device=device)
            obj_tgt[b, iy, ix, ia] = obj_val
        obj_logits.append(grid[..., 4].reshape(-1))
        obj_targets.append(obj_tgt.reshape(-1))

    l_obj = focal_loss(
        torch.cat(obj_logits), torch.cat(obj_targets), weights.focal_gamma, weights.focal_alpha
    )
    if cls_logits:
        l_cls = focal_loss(
            torch.cat(cls_logits), torch.cat(cls_targets), weights.focal_gamma, weights.focal_alpha
        )
        l_box = box_loss(torch.cat(box_preds), torch.cat(box_tgts))
    else:
        l_cls = _zero_like_graph(det_grids[0])
        l_box = _zero_like_graph(det_grids[0])

    total = weights.alpha1 * l_cls + weights.alpha2 * l_obj + weights.alpha3 * l_box
    return total, {"det_class": l_cls, "det_obj": l_obj, "det_box": l_box}


def _seg_terms(logits: torch.Tensor, mask: torch.Tensor, weights: LossWeights):
    probs = torch.softmax(logits, dim=-1)
    tv = tversky_loss(probs, mask, weights.tversky_alpha, weights.tversky_beta)
    onehot = F.one_hot(mask.long(), logits.shape[-1]).to(logits.dtype)
    fo = focal_loss(logits, onehot, weights.focal_gamma, weights.focal_alpha)
    ja = jaccard_loss(probs, mask)
    return tv, fo, ja


def seg_ll_loss(
    lane_logits: torch.Tensor, lane_mask: torch.Tensor, weights: LossWeights
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """``beta1*Tversky + beta2*Focal + beta3*Jaccard`` for lane lines."""
    tv, fo, ja = _seg_terms(lane_logits, lane_mask, weights)
    total = weights.beta1 * tv + weights.beta2 * fo + weights.beta3 * ja
    return total, {"ll_tversky": tv, "ll_focal": fo, "ll_jaccard": ja}


def seg_da_loss(
    drivable_logits: torch.Tensor, drivable_mask: torch.Tensor, weights: LossWeights
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """``gamma1*Tversky + gamma2*Focal`` for the drivable area."""
    tv, fo, _ = _seg_terms(drivable_logits, drivable_mask, weights)
    total = weights.gamma1 * tv + weights.gamma2 * fo
    return total, {"da_tversky": tv, "da_focal": fo}


@dataclass
class BatchTargets:
    """Per-batch supervision: assigned anchors plus stride-4 label grids."""

    assigned: list[AssignedTargets]
    drivable: torch.Tensor  # (B, H/4, W/4) long
    lane: torch.Tensor      # (B, H/4, W/4) long


def total_loss(
    outputs: ModelOutputs,
    targets: BatchTargets,
    anchors: AnchorSet,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """``delta1*L_det + delta2*L_seg_da + delta3*L_seg_ll``.

    The returned breakdown carries the three weighted task terms (summing to
    the total) plus the raw sub-components for logging.
    """
    l_det, det_parts = det_loss(outputs.det, targets.assigned, anchors, weights)
    l_da, da_parts = seg_da_loss(outputs.drivable_logits, targets.drivable, weights)
    l_ll, ll_parts = seg_ll_loss(outputs.lane_logits, targets.lane, weights)
    total = weights.delta1 * l_det + weights.delta2 * l_da + weights.delta3 * l_ll
    breakdown = {
        "total": float(total.detach()),
        "det": float((weights.delta1 * l_det).detach()),
        "seg_da": float((weights.delta2 * l_da).detach()),
        "seg_ll": float((weights.delta3 * l_ll).detach()),
    }
    for parts in (det_parts, da_parts, ll_parts):
        breakdown.update({k: float(v.detach()) for k, v in parts.items()})
    return total, breakdown
