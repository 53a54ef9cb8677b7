"""Training-label regeneration.

Two jobs: pair rider annotations with their two-wheeled vehicles (minimum-cost
bipartite assignment) so each pair becomes a single box, and rasterize source
lane/drivable geometry into the two task label masks.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.path import Path as MplPath

from .data import (
    BBox,
    ManifestError,
    SampleRecord,
    SegMask,
    iou,
    save_mask,
    write_manifest,
)

log = logging.getLogger(__name__)

#: Sentinel cost marking a forbidden (rider, vehicle) pair.
INFEASIBLE = math.inf

# Source vocabulary -> detection class. Riders are kept separate and resolved
# by pairing.
OBJECT_CATEGORY_MAP = {
    "pedestrian": 0,
    "person": 0,
    "car": 1,
    "truck": 1,
    "bus": 1,
    "train": 1,
    "vehicle": 1,
    "motorcycle": 2,
    "motor": 2,
    "scooter": 2,
    "bicycle": 3,
    "bike": 3,
}
RIDER_CATEGORIES = ("rider",)
TWO_WHEELER_CATEGORIES = ("motorcycle", "motor", "scooter", "bicycle", "bike")

DRIVABLE_CATEGORY_MAP = {"main_lane": 1, "alternative_lane": 2}
LANE_CATEGORY_MAP = {"single_line": 1, "double_line": 2, "dashed_line": 3}

#: Stroke width (px) used when rasterizing lane polylines at toy resolution.
LANE_STROKE_WIDTH = 3.0


@dataclass(frozen=True)
class RawAnnotation:
    """One source-annotation record: a category plus box or geometry."""

    category: str
    box: tuple[float, float, float, float] | None = None
    points: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if not self.category:
            raise ValueError("category must be non-empty")
        if self.box is None and not self.points:
            raise ValueError("annotation needs a box or geometry points")


@dataclass(frozen=True)
class AssignmentResult:
    """Minimum-cost matching over a rider x vehicle cost matrix."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_riders: tuple[int, ...]
    unmatched_vehicles: tuple[int, ...]
    total_cost: float


# ---------------------------------------------------------------------------
# Hungarian assignment (shortest augmenting path, O(n^3))
# ---------------------------------------------------------------------------


def _solve_assignment(cost: np.ndarray) -> list[int]:
    """Column matched to each row of a finite n x m cost matrix, n <= m.

    Shortest-augmenting-path formulation with row/column potentials: rows are
    inserted one at a time, each insertion runs a Dijkstra-like scan over
    columns and augments along the tightest path, keeping reduced costs
    non-negative. Each of the n insertions costs O(n*m).
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # 1-based row matched to column
    way = np.zeros(m + 1, dtype=np.int64)

    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    row_to_col = [-1] * n
    for j in range(1, m + 1):
        if match[j] > 0:
            row_to_col[match[j] - 1] = j - 1
    return row_to_col


def hungarian(cost: Sequence[Sequence[float]] | np.ndarray) -> AssignmentResult:
    """Maximum-cardinality, minimum-total-cost matching over feasible pairs.

    ``INFEASIBLE`` entries are never selected. Among matchings that use only
    feasible pairs, cardinality is maximized first, then total cost minimized.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        r = c.shape[0] if c.ndim == 2 else 0
        v = c.shape[1] if c.ndim == 2 else 0
        return AssignmentResult((), tuple(range(r)), tuple(range(v)), 0.0)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if np.any(np.isnan(c)) or np.any(c == -np.inf):
        raise ValueError("cost entries must be finite or INFEASIBLE")

    rows, cols = c.shape
    transposed = rows > cols
    work = c.T.copy() if transposed else c.copy()
    n, m = work.shape

    # Shift feasible costs to be positive, then price infeasible pairs above
    # any feasible total: a full assignment then uses as few of them as
    # possible (max feasible cardinality) before cost is compared.
    fin = np.isfinite(work)
    offset = (np.abs(work[fin]).max() if fin.any() else 0.0) + 1.0
    shifted = np.where(fin, work + offset, 0.0)
    big = 2.0 * offset * (n + 1)
    shifted[~fin] = big

    row_to_col = _solve_assignment(shifted)

    pairs = []
    for r, col in enumerate(row_to_col):
        if col < 0 or not fin[r, col]:
            continue
        pairs.append((col, r) if transposed else (r, col))
    pairs.sort()
    matched_r = {p[0] for p in pairs}
    matched_v = {p[1] for p in pairs}
    total = float(sum(c[r, v] for r, v in pairs))
    return AssignmentResult(
        pairs=tuple(pairs),
        unmatched_riders=tuple(i for i in range(rows) if i not in matched_r),
        unmatched_vehicles=tuple(j for j in range(cols) if j not in matched_v),
        total_cost=total,
    )


# ---------------------------------------------------------------------------
# Rider / two-wheeler pairing
# ---------------------------------------------------------------------------


def _as_box(ann: RawAnnotation) -> tuple[float, float, float, float]:
    if ann.box is None:
        raise ValueError(f"annotation {ann.category!r} has no box")
    return ann.box


def _pair_cost(rider: tuple[float, ...], vehicle: tuple[float, ...]) -> float:
    """1 - IoU, or INFEASIBLE when disjoint and far apart.

    Riders physically overlap their vehicles; a zero-IoU pair is only allowed
    when the center distance stays within 1.5x the larger box diagonal.
    """
    rb = BBox(*rider, class_id=0)
    vb = BBox(*vehicle, class_id=0)
    overlap = iou(rb, vb)
    if overlap > 0.0:
        return 1.0 - overlap
    dist = math.dist(rb.center, vb.center)
    diag = max(math.hypot(rb.width, rb.height), math.hypot(vb.width, vb.height))
    if dist > 1.5 * diag:
        return INFEASIBLE
    return 1.0


def _vehicle_class(category: str) -> int:
    cls = OBJECT_CATEGORY_MAP.get(category)
    if category not in TWO_WHEELER_CATEGORIES or cls is None:
        raise ValueError(f"{category!r} is not a two-wheeler category")
    return cls


def pair_riders(
    riders: Sequence[RawAnnotation], vehicles: Sequence[RawAnnotation]
) -> list[BBox]:
    """Merge riders with their two-wheelers into single boxes.

    Matched pairs produce the enclosing box of rider and vehicle with the
    vehicle's class; unmatched vehicles pass through unchanged; unmatched
    riders become pedestrians.
    """
    cost = np.empty((len(riders), len(vehicles)))
    for i, r in enumerate(riders):
        for j, v in enumerate(vehicles):
            cost[i, j] = _pair_cost(_as_box(r), _as_box(v))
    result = hungarian(cost)

    out: list[BBox] = []
    for i, j in result.pairs:
        rx1, ry1, rx2, ry2 = _as_box(riders[i])
        vx1, vy1, vx2, vy2 = _as_box(vehicles[j])
        out.append(
            BBox(
                min(rx1, vx1),
                min(ry1, vy1),
                max(rx2, vx2),
                max(ry2, vy2),
                class_id=_vehicle_class(vehicles[j].category),
            )
        )
    for j in result.unmatched_vehicles:
        out.append(BBox(*_as_box(vehicles[j]), class_id=_vehicle_class(vehicles[j].category)))
    for i in result.unmatched_riders:
        out.append(BBox(*_as_box(riders[i]), class_id=0))
    return out


# ---------------------------------------------------------------------------
# Mask rasterization
# ---------------------------------------------------------------------------


def _pixel_centers(size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _fill_polygon(label_map: np.ndarray, points: np.ndarray, label: int) -> None:
    h, w = label_map.shape
    xs, ys = _pixel_centers((h, w))
    centers = np.column_stack([xs.ravel(), ys.ravel()])
    inside = MplPath(points).contains_points(centers).reshape(h, w)
    label_map[inside] = label


def _stroke_polyline(
    label_map: np.ndarray, points: np.ndarray, label: int, width: float
) -> None:
    """Label pixels whose center lies strictly within width/2 of the polyline."""
    h, w = label_map.shape
    xs, ys = _pixel_centers((h, w))
    hit = np.zeros((h, w), dtype=bool)
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        dx, dy = x1 - x0, y1 - y0
        seg_sq = dx * dx + dy * dy
        if seg_sq == 0.0:
            continue
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / seg_sq, 0.0, 1.0)
        dist_sq = (xs - (x0 + t * dx)) ** 2 + (ys - (y0 + t * dy)) ** 2
        hit |= dist_sq < (width / 2.0) ** 2
    label_map[hit] = label


def rasterize_masks(
    annotations: Sequence[RawAnnotation],
    size: tuple[int, int],
    stroke_width: float = LANE_STROKE_WIDTH,
) -> tuple[SegMask, SegMask]:
    """Rasterize drivable polygons and lane polylines into the two task masks.

    Overlaps are kept in both masks; the merge happens only at inference.
    Zero-length polylines are skipped with a logged warning.
    """
    drivable = np.zeros(size, dtype=np.uint8)
    lane = np.zeros(size, dtype=np.uint8)
    skipped = 0
    for ann in annotations:
        if ann.category in DRIVABLE_CATEGORY_MAP:
            pts = np.asarray(ann.points, dtype=np.float64)
            _fill_polygon(drivable, pts, DRIVABLE_CATEGORY_MAP[ann.category])
        elif ann.category in LANE_CATEGORY_MAP:
            pts = np.asarray(ann.points, dtype=np.float64)
            span = 0.0 if len(pts) < 2 else float(np.abs(np.diff(pts, axis=0)).sum())
            if span == 0.0:
                skipped += 1
                continue
            _stroke_polyline(lane, pts, LANE_CATEGORY_MAP[ann.category], stroke_width)
        else:
            raise ValueError(f"unknown geometry category {ann.category!r}")
    if skipped:
        log.warning("skipped %d degenerate lane polylines", skipped)
    return SegMask(drivable, "drivable"), SegMask(lane, "lane")


# ---------------------------------------------------------------------------
# Source-annotation conversion (consumed by the CLI `prepare` command)
# ---------------------------------------------------------------------------


def convert_objects(objects: Sequence[RawAnnotation]) -> list[BBox]:
    """Map source object annotations to the four detection classes."""
    riders = [a for a in objects if a.category in RIDER_CATEGORIES]
    wheelers = [a for a in objects if a.category in TWO_WHEELER_CATEGORIES]
    out = pair_riders(riders, wheelers)
    for a in objects:
        if a.category in RIDER_CATEGORIES or a.category in TWO_WHEELER_CATEGORIES:
            continue
        cls = OBJECT_CATEGORY_MAP.get(a.category)
        if cls is None:
            raise ValueError(f"unknown object category {a.category!r}")
        out.append(BBox(*_as_box(a), class_id=cls))
    return out


def prepare_dataset(source_path: str | Path, out_dir: str | Path) -> Path:
    """Convert a source-annotation JSON into the standard manifest format.

    The source document is ``{"images": [{id, image_path, width, height,
    objects, drivable, lanes}, ...]}`` with category/box/geometry records as
    produced by the upstream labeling tool. Masks are written under
    ``out_dir`` and the manifest references the original images.
    """
    source_path = Path(source_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(source_path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict) or "images" not in doc:
        raise ManifestError(f"{source_path}: expected a top-level 'images' array")

    records = []
    for entry in doc["images"]:
        sid = entry["id"]
        size = (int(entry["height"]), int(entry["width"]))
        objects = [
            RawAnnotation(o["category"], box=tuple(o["box"])) for o in entry.get("objects", [])
        ]
        geoms = [
            RawAnnotation(g["category"], points=tuple(map(tuple, g["polygon"])))
            for g in entry.get("drivable", [])
        ] + [
            RawAnnotation(g["category"], points=tuple(map(tuple, g["polyline"])))
            for g in entry.get("lanes", [])
        ]
        boxes = convert_objects(objects)
        clipped = []
        for b in boxes:
            kept = b.clip(size[1], size[0])
            if kept is not None:
                clipped.append(kept)
        drivable, lane = rasterize_masks(geoms, size)
        drv_path = out_dir / f"{sid}_drivable.png"
        lane_path = out_dir / f"{sid}_lane.png"
        save_mask(drivable, drv_path)
        save_mask(lane, lane_path)
        image_path = (source_path.parent / entry["image_path"]).resolve()
        records.append(
            SampleRecord(
                id=sid,
                image_path=image_path,
                boxes=tuple(clipped),
                drivable_mask_path=drv_path,
                lane_mask_path=lane_path,
            )
        )
    return write_manifest(records, out_dir / "manifest.json")
