"""Shared data model: boxes, label masks, samples, and the dataset manifest.

Conventions used everywhere downstream:
  * boxes are corner-form ``(x1, y1, x2, y2)`` in absolute, continuous pixels;
  * masks are dense integer label grids; pixel ``(row i, col j)`` has its
    center at ``(x, y) = (j + 0.5, i + 0.5)``;
  * images are ``(H, W, 3)`` float arrays in ``[0, 1]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

DET_CLASSES = ("pedestrian", "vehicle", "scooter", "bicycle")

PALETTES: dict[str, tuple[str, ...]] = {
    "drivable": ("background", "main_lane", "alternative_lane"),
    "lane": ("background", "single_line", "double_line", "dashed_line"),
    "merged": (
        "background",
        "main_lane",
        "alternative_lane",
        "single_line",
        "double_line",
        "dashed_line",
    ),
}

# Offset applied to nonzero lane labels when folding them into the merged
# palette: lane class k maps to merged class k + 2.
LANE_MERGE_OFFSET = 2


class ManifestError(ValueError):
    """A dataset manifest (or one of its entries) violates the schema."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with a detection class and an optional score."""

    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    score: float | None = None

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {(self.x1, self.y1, self.x2, self.y2)}")
        if not 0 <= self.class_id < len(DET_CLASSES):
            raise ValueError(f"class_id {self.class_id} outside [0, {len(DET_CLASSES) - 1}]")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def clip(self, width: float, height: float) -> "BBox | None":
        """Clamp to ``[0, width] x [0, height]``; None if nothing remains."""
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        if x1 >= x2 or y1 >= y2:
            return None
        return BBox(x1, y1, x2, y2, self.class_id, self.score)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; symmetric, in [0, 1]."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class SegMask:
    """Dense per-pixel label grid tied to one of the declared palettes."""

    class_map: np.ndarray
    palette: str

    def __post_init__(self):
        if self.palette not in PALETTES:
            raise ValueError(f"unknown palette {self.palette!r}")
        cm = self.class_map
        if cm.ndim != 2:
            raise ValueError(f"class_map must be 2-D, got shape {cm.shape}")
        if not np.issubdtype(cm.dtype, np.integer):
            raise ValueError(f"class_map must be integer, got {cm.dtype}")
        n = len(PALETTES[self.palette])
        if cm.size and (cm.min() < 0 or cm.max() >= n):
            raise ValueError(f"labels outside palette {self.palette!r} (0..{n - 1})")

    @property
    def shape(self) -> tuple[int, int]:
        return self.class_map.shape  # type: ignore[return-value]

    @property
    def num_classes(self) -> int:
        return len(PALETTES[self.palette])


def merge_label_maps(drivable: np.ndarray, lane: np.ndarray) -> np.ndarray:
    """Fold per-task label maps into the six-class merged palette.

    Lane labels win wherever the lane map is foreground.
    """
    if drivable.shape != lane.shape:
        raise ValueError(f"shape mismatch {drivable.shape} vs {lane.shape}")
    return np.where(lane > 0, lane + LANE_MERGE_OFFSET, drivable).astype(np.uint8)


@dataclass(frozen=True)
class Sample:
    """One image with its detection boxes and two segmentation masks."""

    image: np.ndarray
    boxes: tuple[BBox, ...]
    drivable: SegMask
    lane: SegMask
    source_id: str

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {img.shape}")
        h, w = img.shape[:2]
        if self.drivable.palette != "drivable" or self.lane.palette != "lane":
            raise ValueError("masks must use their task palettes")
        if self.drivable.shape != (h, w) or self.lane.shape != (h, w):
            raise ValueError("mask dimensions must match the image")
        for b in self.boxes:
            if b.x2 > w + 1e-6 or b.y2 > h + 1e-6 or b.x1 < -1e-6 or b.y1 < -1e-6:
                raise ValueError(f"box {b} exceeds image bounds ({w}x{h})")

    @property
    def size(self) -> tuple[int, int]:
        """(H, W) of the image."""
        return self.image.shape[:2]  # type: ignore[return-value]


@dataclass(frozen=True)
class DetPrediction:
    """Raw detection-head grids for a single image.

    One array per stride, shaped ``(H/s, W/s, A, 5 + C)``: four box offsets,
    one objectness logit and C class logits per anchor per cell.
    """

    grids: tuple[np.ndarray, ...]
    strides: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if len(self.grids) != len(self.strides):
            raise ValueError("one grid per stride required")
        for g in self.grids:
            if g.ndim != 4:
                raise ValueError(f"grid must be 4-D (h, w, A, 5+C), got {g.shape}")


# ---------------------------------------------------------------------------
# Image / mask file IO
# ---------------------------------------------------------------------------


def load_image(path: str | Path) -> np.ndarray:
    """Read an RGB image file as float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)


def load_mask(path: str | Path, palette: str) -> SegMask:
    """Read a single-channel 8-bit label image as a SegMask."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.uint8)
    return SegMask(arr, palette)


def save_mask(mask: SegMask, path: str | Path) -> None:
    Image.fromarray(mask.class_map.astype(np.uint8), mode="L").save(path, optimize=False)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {"id", "image_path", "boxes", "drivable_mask_path", "lane_mask_path"}
_BOX_KEYS = {"x1", "y1", "x2", "y2", "class"}


@dataclass(frozen=True)
class SampleRecord:
    """Lazily loadable descriptor for one manifest entry."""

    id: str
    image_path: Path
    boxes: tuple[BBox, ...]
    drivable_mask_path: Path
    lane_mask_path: Path
    image_size: tuple[int, int] = field(default=(0, 0))  # (W, H) as probed

    def load(self) -> Sample:
        return Sample(
            image=load_image(self.image_path),
            boxes=self.boxes,
            drivable=load_mask(self.drivable_mask_path, "drivable"),
            lane=load_mask(self.lane_mask_path, "lane"),
            source_id=self.id,
        )


def _probe_size(path: Path) -> tuple[int, int]:
    """(W, H) from the image header without decoding pixel data."""
    with Image.open(path) as im:
        return im.size


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Parse and validate a dataset manifest.

    Entries are validated eagerly (schema, referenced files, size agreement
    between image and masks) but pixel data is only decoded by
    ``SampleRecord.load``.
    """
    path = Path(path)
    with open(path, "r") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(doc, list):
        raise ManifestError(f"manifest {path} must be a JSON array of entries")

    base = path.parent
    records: list[SampleRecord] = []
    for i, entry in enumerate(doc):
        label = f"entry {i}"
        if isinstance(entry, dict) and isinstance(entry.get("id"), str):
            label = f"entry {i} (id={entry['id']!r})"
        if not isinstance(entry, dict) or set(entry) != _MANIFEST_KEYS:
            raise ManifestError(f"{label}: keys must be exactly {sorted(_MANIFEST_KEYS)}")
        boxes = []
        for j, b in enumerate(entry["boxes"]):
            if not isinstance(b, dict) or set(b) != _BOX_KEYS:
                raise ManifestError(f"{label}: box {j} keys must be {sorted(_BOX_KEYS)}")
            try:
                boxes.append(BBox(b["x1"], b["y1"], b["x2"], b["y2"], int(b["class"])))
            except ValueError as e:
                raise ManifestError(f"{label}: box {j}: {e}") from e
        img = base / entry["image_path"]
        drv = base / entry["drivable_mask_path"]
        lane = base / entry["lane_mask_path"]
        for p in (img, drv, lane):
            if not p.is_file():
                raise ManifestError(f"{label}: missing file {p}")
        size = _probe_size(img)
        for name, p in (("drivable", drv), ("lane", lane)):
            msize = _probe_size(p)
            if msize != size:
                raise ManifestError(
                    f"{label}: {name} mask size {msize} does not match image size {size}"
                )
        records.append(
            SampleRecord(
                id=entry["id"],
                image_path=img,
                boxes=tuple(boxes),
                drivable_mask_path=drv,
                lane_mask_path=lane,
                image_size=size,
            )
        )
    return records


def write_manifest(records: Sequence[SampleRecord], path: str | Path) -> Path:
    """Write records as a manifest with paths relative to the manifest dir."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        try:
            return p.resolve().relative_to(base).as_posix()
        except ValueError:
            return str(p)

    doc = [
        {
            "id": r.id,
            "image_path": rel(r.image_path),
            "boxes": [
                {"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "class": b.class_id}
                for b in r.boxes
            ],
            "drivable_mask_path": rel(r.drivable_mask_path),
            "lane_mask_path": rel(r.lane_mask_path),
        }
        for r in records
    ]
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    return path
