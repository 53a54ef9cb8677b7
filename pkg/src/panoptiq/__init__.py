"""Toy-scale quantization-aware multi-task road perception.

One shared backbone with an anchor-based detection head and two segmentation
heads (drivable area, lane lines), trained with a staged composite-loss
recipe, compressed with quantization-aware training, and evaluated with
mAP@0.5 / mIoU.
"""

__version__ = "0.1.0"

from .data import BBox, Sample, SegMask, iou, load_manifest, write_manifest
from .network import NetworkConfig, build, reparameterize

__all__ = [
    "BBox",
    "Sample",
    "SegMask",
    "iou",
    "load_manifest",
    "write_manifest",
    "NetworkConfig",
    "build",
    "reparameterize",
    "__version__",
]
