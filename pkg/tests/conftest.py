import numpy as np
import pytest

from panoptiq.data import BBox, Sample, SegMask


class QueuedRng:
    """Stand-in for numpy Generator returning queued draws (white-box tests)."""

    def __init__(self, uniforms=(), randoms=(), integers=()):
        self._uniforms = list(uniforms)
        self._randoms = list(randoms)
        self._integers = list(integers)

    def uniform(self, low=0.0, high=1.0, size=None):
        if size is None:
            u = self._uniforms.pop(0)
            return low + (high - low) * u
        us = [self._uniforms.pop(0) for _ in range(int(np.prod(size)))]
        return low + (high - low) * np.asarray(us).reshape(size)

    def random(self):
        return self._randoms.pop(0)

    def integers(self, low, high=None, size=None):
        if size is None:
            return self._integers.pop(0)
        return np.asarray([self._integers.pop(0) for _ in range(size)])


def make_sample(seed=0, size=(96, 160), n_boxes=2, source_id="s") -> Sample:
    h, w = size
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)
    boxes = []
    for _ in range(n_boxes):
        x1 = float(rng.integers(0, w - 20))
        y1 = float(rng.integers(0, h - 20))
        bw = float(rng.integers(8, 20))
        bh = float(rng.integers(8, 20))
        boxes.append(BBox(x1, y1, x1 + bw, y1 + bh, int(rng.integers(0, 4))))
    drivable = rng.integers(0, 3, size=(h, w)).astype(np.uint8)
    lane = rng.integers(0, 4, size=(h, w)).astype(np.uint8)
    return Sample(
        image=image,
        boxes=tuple(boxes),
        drivable=SegMask(drivable, "drivable"),
        lane=SegMask(lane, "lane"),
        source_id=source_id,
    )


@pytest.fixture
def sample():
    return make_sample(seed=1)
