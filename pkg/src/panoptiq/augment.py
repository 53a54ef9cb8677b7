"""Training-time augmentations: normalize, perspective, HSV jitter, flip, mosaic.

All operations are pure given an explicit ``numpy.random.Generator``; the
trainer splits one generator per sample so parallel workers stay
deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .data import BBox, Sample, SegMask

NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)

# Boxes keeping less than this fraction of their area after a geometric
# transform (clipping included) are dropped as degenerate slivers.
MIN_BOX_AREA_RATIO = 0.10

MOSAIC_FILL = 0.447  # mid-gray canvas outside placed images


@dataclass(frozen=True)
class AugmentConfig:
    normalize_mean: tuple[float, float, float] = NORM_MEAN
    normalize_std: tuple[float, float, float] = NORM_STD
    perspective_scale: float = 0.25
    translate: float = 0.1
    hsv_h: float = 0.015
    hsv_s: float = 0.7
    hsv_v: float = 0.4
    flip_prob: float = 0.5
    mosaic_enabled: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.normalize_std):
            raise ValueError("normalize_std components must be > 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")
        for name in ("perspective_scale", "translate", "hsv_h", "hsv_s", "hsv_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def normalize(
    image: np.ndarray,
    mean: tuple[float, float, float] = NORM_MEAN,
    std: tuple[float, float, float] = NORM_STD,
) -> np.ndarray:
    """Per-channel (x - mean) / std."""
    m = np.asarray(mean, dtype=np.float32)
    s = np.asarray(std, dtype=np.float32)
    return (image.astype(np.float32) - m) / s


def denormalize(
    image: np.ndarray,
    mean: tuple[float, float, float] = NORM_MEAN,
    std: tuple[float, float, float] = NORM_STD,
) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32)
    s = np.asarray(std, dtype=np.float32)
    return image.astype(np.float32) * s + m


def _transform_boxes(
    boxes: tuple[BBox, ...], matrix: np.ndarray, width: int, height: int
) -> tuple[BBox, ...]:
    """Affine-map axis-aligned boxes, clip, and apply the area survival rule."""
    out = []
    for b in boxes:
        corners = np.array(
            [[b.x1, b.y1, 1.0], [b.x2, b.y2, 1.0]], dtype=np.float64
        ) @ matrix.T
        x1, y1 = corners.min(axis=0)
        x2, y2 = corners.max(axis=0)
        if x1 >= x2 or y1 >= y2:
            continue
        moved = BBox(x1, y1, x2, y2, b.class_id, b.score)
        kept = moved.clip(width, height)
        if kept is not None and kept.area >= MIN_BOX_AREA_RATIO * b.area:
            out.append(kept)
    return tuple(out)


def random_perspective(
    sample: Sample, cfg: AugmentConfig, rng: np.random.Generator
) -> Sample:
    """Random scale about the image center plus random translation.

    Scale is drawn from ``1 +- perspective_scale`` and translation from
    ``+- translate x image size``. Masks are warped with nearest-neighbor
    label sampling; boxes are transformed, clipped and area-filtered.
    """
    h, w = sample.size
    s = 1.0 + cfg.perspective_scale * rng.uniform(-1.0, 1.0)
    tx = cfg.translate * w * rng.uniform(-1.0, 1.0)
    ty = cfg.translate * h * rng.uniform(-1.0, 1.0)
    matrix = np.array(
        [[s, 0.0, (1.0 - s) * w / 2.0 + tx], [0.0, s, (1.0 - s) * h / 2.0 + ty]],
        dtype=np.float64,
    )
    if s == 1.0 and tx == 0.0 and ty == 0.0:
        return sample
    image = cv2.warpAffine(
        sample.image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderValue=0.0
    )
    drv = cv2.warpAffine(
        sample.drivable.class_map, matrix, (w, h), flags=cv2.INTER_NEAREST, borderValue=0
    )
    lane = cv2.warpAffine(
        sample.lane.class_map, matrix, (w, h), flags=cv2.INTER_NEAREST, borderValue=0
    )
    return Sample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        boxes=_transform_boxes(sample.boxes, matrix, w, h),
        drivable=SegMask(drv, "drivable"),
        lane=SegMask(lane, "lane"),
        source_id=sample.source_id,
    )


def hsv_jitter(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative HSV gains ``1 + u*f`` with ``u ~ U(-1, 1)`` per channel.

    Hue wraps modulo its range; saturation and value clamp to [0, 1].
    """
    gains = 1.0 + rng.uniform(-1.0, 1.0, size=3) * np.array(
        [cfg.hsv_h, cfg.hsv_s, cfg.hsv_v]
    )
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0).astype(np.float64))
    hsv[..., 0] = (hsv[..., 0] * gains[0]) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * gains[1], 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * gains[2], 0.0, 1.0)
    return hsv_to_rgb(hsv).astype(np.float32)


def hflip(sample: Sample) -> Sample:
    """Mirror image, masks and boxes about the vertical axis; an involution."""
    h, w = sample.size
    boxes = tuple(
        BBox(w - b.x2, b.y1, w - b.x1, b.y2, b.class_id, b.score) for b in sample.boxes
    )
    return Sample(
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        boxes=boxes,
        drivable=SegMask(np.ascontiguousarray(sample.drivable.class_map[:, ::-1]), "drivable"),
        lane=SegMask(np.ascontiguousarray(sample.lane.class_map[:, ::-1]), "lane"),
        source_id=sample.source_id,
    )


def downsample_labels(label_map: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor (pixel-center) label downsampling by an integer factor."""
    if factor == 1:
        return label_map
    off = factor // 2
    return np.ascontiguousarray(label_map[off::factor, off::factor])


def mosaic(
    samples: tuple[Sample, ...] | list[Sample],
    cfg: AugmentConfig,
    rng: np.random.Generator,
    center: tuple[int, int] | None = None,
) -> Sample:
    """Composite four samples around a random center on a 2W x 2H canvas.

    The center is drawn from the middle half of the canvas, each sample fills
    one quadrant (cropped at the canvas and center boundaries), and the whole
    canvas is rescaled back to W x H. ``center`` overrides the draw for
    deterministic tests.
    """
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    h, w = samples[0].size
    for s in samples:
        if s.size != (h, w):
            raise ValueError("mosaic samples must share one image size")
    if center is None:
        xc = int(rng.integers(w // 2, 3 * w // 2 + 1))
        yc = int(rng.integers(h // 2, 3 * h // 2 + 1))
    else:
        xc, yc = center

    canvas = np.full((2 * h, 2 * w, 3), MOSAIC_FILL, dtype=np.float32)
    drv_canvas = np.zeros((2 * h, 2 * w), dtype=np.uint8)
    lane_canvas = np.zeros((2 * h, 2 * w), dtype=np.uint8)
    boxes: list[BBox] = []

    for i, s in enumerate(samples):
        if i == 0:  # top-left, anchored at the center point
            x1a, y1a, x2a, y2a = max(xc - w, 0), max(yc - h, 0), xc, yc
            x1b, y1b = w - (x2a - x1a), h - (y2a - y1a)
        elif i == 1:  # top-right
            x1a, y1a, x2a, y2a = xc, max(yc - h, 0), min(xc + w, 2 * w), yc
            x1b, y1b = 0, h - (y2a - y1a)
        elif i == 2:  # bottom-left
            x1a, y1a, x2a, y2a = max(xc - w, 0), yc, xc, min(yc + h, 2 * h)
            x1b, y1b = w - (x2a - x1a), 0
        else:  # bottom-right
            x1a, y1a, x2a, y2a = xc, yc, min(xc + w, 2 * w), min(yc + h, 2 * h)
            x1b, y1b = 0, 0
        x2b, y2b = x1b + (x2a - x1a), y1b + (y2a - y1a)
        if x2a <= x1a or y2a <= y1a:
            continue
        canvas[y1a:y2a, x1a:x2a] = s.image[y1b:y2b, x1b:x2b]
        drv_canvas[y1a:y2a, x1a:x2a] = s.drivable.class_map[y1b:y2b, x1b:x2b]
        lane_canvas[y1a:y2a, x1a:x2a] = s.lane.class_map[y1b:y2b, x1b:x2b]
        dx, dy = x1a - x1b, y1a - y1b
        for b in s.boxes:
            shifted = BBox(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy, b.class_id, b.score)
            # Clip to the quadrant actually painted, then rescale by 1/2.
            kept = shifted.clip(2 * w, 2 * h)
            if kept is None:
                continue
            qx1 = max(kept.x1, x1a)
            qy1 = max(kept.y1, y1a)
            qx2 = min(kept.x2, x2a)
            qy2 = min(kept.y2, y2a)
            if qx1 >= qx2 or qy1 >= qy2:
                continue
            final = BBox(qx1 / 2, qy1 / 2, qx2 / 2, qy2 / 2, b.class_id, b.score)
            if final.area >= MIN_BOX_AREA_RATIO * b.area:
                boxes.append(final)

    image = cv2.resize(canvas, (w, h), interpolation=cv2.INTER_LINEAR)
    return Sample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        boxes=tuple(boxes),
        drivable=SegMask(downsample_labels(drv_canvas, 2), "drivable"),
        lane=SegMask(downsample_labels(lane_canvas, 2), "lane"),
        source_id=samples[0].source_id + "+mosaic",
    )


def apply_photometric_geometric(
    sample: Sample, cfg: AugmentConfig, rng: np.random.Generator
) -> Sample:
    """Perspective -> HSV jitter -> coin-flip horizontal mirror."""
    out = random_perspective(sample, cfg, rng)
    image = hsv_jitter(out.image, cfg, rng)
    out = Sample(image, out.boxes, out.drivable, out.lane, out.source_id)
    if rng.random() < cfg.flip_prob:
        out = hflip(out)
    return out
