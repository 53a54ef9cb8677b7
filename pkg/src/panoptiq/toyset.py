"""Deterministic synthetic dataset: geometric roads, lane strokes, and
class-colored rectangles standing in for traffic objects.

Scene geometry snaps to a 4-pixel grid (the segmentation heads' output
stride) so the learnability ceiling of the toy task is limited by the model,
not by sub-grid rasterization. Labels are emitted pixel-exactly from the same
geometry that paints the image; objects occlude the masks beneath them.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.path import Path as MplPath

from .data import BBox, SampleRecord, SegMask, iou, save_image, save_mask, write_manifest

# Hue is the only channel the HSV jitter leaves nearly intact (gain 0.015 vs
# 0.7/0.4 on S/V), so classes that must never be confused across groups
# (objects vs lane strokes) sit on well-separated hues.
ROAD_COLORS = {1: (0.20, 0.45, 0.25), 2: (0.45, 0.24, 0.22)}  # main, alternative
LANE_COLORS = {1: (0.95, 0.95, 0.95), 2: (0.95, 0.85, 0.30), 3: (0.40, 0.85, 0.95)}
# Object hues live in the [0.6, 0.95] band, the only stretch far from the
# stroke hues (yellow 0.14, cyan 0.50) and road hues (green 0.36, brick 0.01):
# a detector keyed on a background hue hallucinates boxes all over it.
OBJECT_COLORS = {
    0: (0.90, 0.30, 0.60),  # pedestrian: pink (hue 0.92)
    1: (0.25, 0.35, 0.90),  # vehicle: blue (hue 0.64)
    2: (0.85, 0.15, 0.95),  # scooter: violet-magenta (hue 0.81)
    3: (0.50, 0.20, 0.95),  # bicycle: violet-blue (hue 0.73)
}
SKY_TOP = (0.55, 0.65, 0.75)
GROUND = (0.35, 0.33, 0.30)

# (w, h) choices per class: multiples of the 4 px grid, each within ~1.3x of
# an anchor shape (regression starts near the prior), minimum side 12 px
# (thinner objects need sub-2px regression for IoU 0.5, noise-dominated at
# toy training budgets).
OBJECT_SIZES = {
    0: ((12, 24), (12, 28)),  # pedestrian: tall, narrow
    1: ((40, 28), (48, 32)),  # vehicle: large, wide
    2: ((12, 20), (16, 24)),  # scooter: small, tall
    3: ((20, 12), (24, 16)),  # bicycle: small, wide
}


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_images: int = 64
    image_size: tuple[int, int] = (96, 160)
    objects_per_image: tuple[int, int] = (3, 4)
    lane_lines_per_image: tuple[int, int] = (2, 3)
    grid: int = 4
    background_noise: float = 0.015

    def __post_init__(self):
        if self.n_images <= 0:
            raise ValueError("n_images must be positive")
        if self.objects_per_image[0] > self.objects_per_image[1]:
            raise ValueError("objects_per_image range is inverted")


@dataclass
class Scene:
    image: np.ndarray
    boxes: tuple[BBox, ...]
    drivable: SegMask
    lane: SegMask
    object_pixels: np.ndarray  # bool map of pixels painted by objects


def _rng_for(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(index,)))


def _snap(value: float, grid: int) -> int:
    return int(round(value / grid)) * grid


def _fill_quad(label_map: np.ndarray, quad: list[tuple[float, float]], label: int) -> None:
    h, w = label_map.shape
    ys, xs = np.mgrid[0:h, 0:w]
    centers = np.column_stack([(xs + 0.5).ravel(), (ys + 0.5).ravel()])
    inside = MplPath(quad).contains_points(centers).reshape(h, w)
    label_map[inside] = label


def render_scene(spec: SceneSpec, index: int) -> Scene:
    """Render one scene; fully determined by (spec.seed, index)."""
    h, w = spec.image_size
    g = spec.grid
    rng = _rng_for(spec, index)

    # Background gradient with a touch of noise.
    t = np.linspace(0.0, 1.0, h)[:, None, None]
    image = (1.0 - t) * np.asarray(SKY_TOP) + t * np.asarray(GROUND)
    image = image * np.ones((h, w, 3))
    if spec.background_noise > 0:
        image += rng.normal(0.0, spec.background_noise, size=(h, w, 3))

    drivable = np.zeros((h, w), dtype=np.uint8)
    lane = np.zeros((h, w), dtype=np.uint8)

    # Road trapezoid split into two lanes by a divider line.
    y_h = _snap(rng.uniform(0.25, 0.45) * h, g)
    xb0 = _snap(rng.uniform(0.0, 0.15) * w, g)
    xb1 = _snap(rng.uniform(0.85, 1.0) * w, g)
    xc = _snap(rng.uniform(0.35, 0.65) * w, g)
    half_top = _snap(rng.uniform(0.08, 0.18) * w, g)
    xt0, xt1 = max(xc - half_top, 0), min(xc + half_top, w)
    d_bot = _snap(rng.uniform(0.35, 0.65) * (xb1 - xb0) + xb0, g)
    d_top = _snap(rng.uniform(0.3, 0.7) * (xt1 - xt0) + xt0, g)
    main_left = bool(rng.integers(0, 2))
    left_label, right_label = (1, 2) if main_left else (2, 1)
    _fill_quad(drivable, [(xb0, h), (d_bot, h), (d_top, y_h), (xt0, y_h)], left_label)
    _fill_quad(drivable, [(d_bot, h), (xb1, h), (xt1, y_h), (d_top, y_h)], right_label)
    for label in (1, 2):
        image[drivable == label] = ROAD_COLORS[label]

    # Vertical lane strokes, grid-aligned, distinct x slots. The dashed class
    # is the rarest; it gets a double-width stroke and long dashes so its
    # pixel mass stays learnable.
    n_lines = int(rng.integers(spec.lane_lines_per_image[0], spec.lane_lines_per_image[1] + 1))
    slots = list(range(2 * g, w - 5 * g, 6 * g))
    rng.shuffle(slots)
    for x0 in slots[:n_lines]:
        line_type = int(rng.integers(1, 4))
        stroke = np.zeros((h, w), dtype=bool)
        if line_type == 1:  # single solid stroke
            stroke[y_h:h, x0 : x0 + g] = True
        elif line_type == 2:  # two parallel strokes, wide gap
            stroke[y_h:h, x0 : x0 + g] = True
            stroke[y_h:h, x0 + 3 * g : x0 + 4 * g] = True
        else:  # dashes: double-width, 3 cells on, 2 off
            for y0 in range(y_h, h, 5 * g):
                stroke[y0 : min(y0 + 3 * g, h), x0 : x0 + 2 * g] = True
        lane[stroke] = line_type
        image[stroke] = np.asarray(LANE_COLORS[line_type])

    # Objects: solid class-colored rectangles with a darker inner border.
    boxes: list[BBox] = []
    object_pixels = np.zeros((h, w), dtype=bool)
    n_objects = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    for _ in range(n_objects):
        cls = int(rng.integers(0, 4))
        ow, oh = (int(v) for v in OBJECT_SIZES[cls][int(rng.integers(0, 2))])
        placed = False
        for _attempt in range(40):
            x0 = min(max(_snap(rng.uniform(0, w - ow), g), 0), w - ow)
            y0 = min(max(_snap(rng.uniform(h * 0.2, h - oh), g), 0), h - oh)
            cand = BBox(x0, y0, x0 + ow, y0 + oh, cls)
            # hard 4 px separation: adjacent color blobs merge visually and
            # poison both boxes' supervision
            if all(
                cand.x1 - 4 >= o.x2 or o.x1 - 4 >= cand.x2
                or cand.y1 - 4 >= o.y2 or o.y1 - 4 >= cand.y2
                for o in boxes
            ):
                placed = True
                break
        if not placed:
            continue
        boxes.append(cand)
        shade = 1.0 + rng.uniform(-0.06, 0.06)
        color = np.clip(np.asarray(OBJECT_COLORS[cls]) * shade, 0.0, 1.0)
        # solid fill with a bright inner border: strong edges anchor the box
        # regression, uniform color keys the class
        image[y0 : y0 + oh, x0 : x0 + ow] = np.clip(0.5 * color + 0.5, 0.0, 1.0)
        image[y0 + 2 : y0 + oh - 2, x0 + 2 : x0 + ow - 2] = color
        object_pixels[y0 : y0 + oh, x0 : x0 + ow] = True
        drivable[y0 : y0 + oh, x0 : x0 + ow] = 0
        lane[y0 : y0 + oh, x0 : x0 + ow] = 0

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    # Quantize exactly like the PNG round trip so in-memory == reloaded.
    image = np.round(image * 255.0) / np.float32(255.0)
    return Scene(
        image=image.astype(np.float32),
        boxes=tuple(boxes),
        drivable=SegMask(drivable, "drivable"),
        lane=SegMask(lane, "lane"),
        object_pixels=object_pixels,
    )


def _write_one(args) -> dict:
    spec, index, out_dir = args
    scene = render_scene(spec, index)
    stem = f"{index:04d}"
    save_image(scene.image, out_dir / f"{stem}.png")
    save_mask(scene.drivable, out_dir / f"{stem}_drivable.png")
    save_mask(scene.lane, out_dir / f"{stem}_lane.png")
    return {
        "id": stem,
        "boxes": [(b.x1, b.y1, b.x2, b.y2, b.class_id) for b in scene.boxes],
    }


def generate(spec: SceneSpec, out_dir: str | Path, workers: int | None = None) -> Path:
    """Render the dataset and write the core manifest; returns its path.

    Deterministic per seed regardless of worker count: every image derives
    its own generator from (seed, index).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if workers is None:
        workers = int(os.environ.get("PANOPTIQ_WORKERS", "0"))
    jobs = [(spec, i, out_dir) for i in range(spec.n_images)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_write_one, jobs))
    else:
        entries = [_write_one(j) for j in jobs]

    records = []
    for e in entries:
        stem = e["id"]
        records.append(
            SampleRecord(
                id=stem,
                image_path=out_dir / f"{stem}.png",
                boxes=tuple(BBox(*b[:4], class_id=b[4]) for b in e["boxes"]),
                drivable_mask_path=out_dir / f"{stem}_drivable.png",
                lane_mask_path=out_dir / f"{stem}_lane.png",
            )
        )
    return write_manifest(records, out_dir / "manifest.json")
