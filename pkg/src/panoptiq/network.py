"""The miniature multi-task model.

Backbone of four ELAN stages (parallel conv branches concatenated then fused
pointwise), an SPP neck at the deepest scale with top-down fusion, an
anchor-based detection head built from re-parameterizable convolutions on
three scales, and two stride-4 segmentation heads.

Quantization hooks: every conv block exposes ``weight_fq`` / ``act_fq`` slots
(plain attributes, ``None`` by default). The quantization module fills them;
this module never imports it.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import read_archive, write_archive
from .data import PALETTES

#: Anchor (w, h) priors at the full 384x640 training resolution.
FULL_SCALE_ANCHORS = (
    (12, 16), (19, 36), (40, 28),
    (36, 75), (76, 55), (72, 146),
    (142, 110), (192, 243), (459, 401),
)
FULL_SCALE_INPUT = (384, 640)

STRIDES = (8, 16, 32)
ANCHORS_PER_SCALE = 3

BN_MOMENTUM = 0.03
BN_EPS = 1e-3

CHECKPOINT_FORMAT = "panoptiq-checkpoint/1"


class ConfigError(ValueError):
    """Invalid model or run configuration."""


def scaled_anchors(input_size: tuple[int, int]) -> tuple[tuple[float, float], ...]:
    """Full-scale anchors rescaled to ``input_size`` (preserves anchor/stride ratios)."""
    sy = input_size[0] / FULL_SCALE_INPUT[0]
    sx = input_size[1] / FULL_SCALE_INPUT[1]
    return tuple((w * sx, h * sy) for (w, h) in FULL_SCALE_ANCHORS)


@dataclass(frozen=True)
class AnchorSet:
    """Nine (w, h) anchor priors in input pixels, three per stride."""

    pairs: tuple[tuple[float, float], ...]
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        if len(self.pairs) != ANCHORS_PER_SCALE * len(self.strides):
            raise ConfigError(f"expected {ANCHORS_PER_SCALE * len(self.strides)} anchors")
        areas = [w * h for (w, h) in self.pairs]
        if any(w <= 0 or h <= 0 for (w, h) in self.pairs):
            raise ConfigError("anchor sides must be positive")
        if any(a > b for a, b in zip(areas, areas[1:])):
            raise ConfigError("anchors must be sorted by area")

    def per_scale(self, scale_index: int) -> tuple[tuple[float, float], ...]:
        i = scale_index * ANCHORS_PER_SCALE
        return self.pairs[i : i + ANCHORS_PER_SCALE]


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int] = (96, 160)
    width_multiple: float = 1.0
    depth_multiple: float = 1.0
    num_det_classes: int = 4
    drivable_classes: int = 3
    lane_classes: int = 4
    anchors: AnchorSet | None = None

    def __post_init__(self):
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ConfigError(f"input size {self.input_size} must be divisible by 32")
        if self.width_multiple <= 0 or self.depth_multiple <= 0:
            raise ConfigError("width/depth multiples must be positive")
        if self.drivable_classes != len(PALETTES["drivable"]):
            raise ConfigError("drivable_classes must match the drivable palette")
        if self.lane_classes != len(PALETTES["lane"]):
            raise ConfigError("lane_classes must match the lane palette")
        if self.anchors is None:
            object.__setattr__(self, "anchors", AnchorSet(scaled_anchors(self.input_size)))

    @property
    def anchor_set(self) -> AnchorSet:
        assert self.anchors is not None
        return self.anchors

    @property
    def strides(self) -> tuple[int, ...]:
        return self.anchor_set.strides

    def grid_shapes(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        return [(h // s, w // s) for s in self.strides]

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "width_multiple": self.width_multiple,
            "depth_multiple": self.depth_multiple,
            "num_det_classes": self.num_det_classes,
            "drivable_classes": self.drivable_classes,
            "lane_classes": self.lane_classes,
            "anchors": [list(p) for p in self.anchor_set.pairs],
        }

    @staticmethod
    def from_dict(doc: dict) -> "NetworkConfig":
        doc = dict(doc)
        anchors = doc.pop("anchors", None)
        cfg = NetworkConfig(
            input_size=tuple(doc["input_size"]),
            width_multiple=doc.get("width_multiple", 1.0),
            depth_multiple=doc.get("depth_multiple", 1.0),
            num_det_classes=doc.get("num_det_classes", 4),
            drivable_classes=doc.get("drivable_classes", 3),
            lane_classes=doc.get("lane_classes", 4),
            anchors=AnchorSet(tuple(tuple(p) for p in anchors)) if anchors else None,
        )
        return cfg


@dataclass
class ModelOutputs:
    """Raw head outputs for a batch, channels-last at the API boundary.

    ``det[i]`` has shape (B, H/s, W/s, A, 5 + C) for stride s; segmentation
    logits are (B, H/4, W/4, classes).
    """

    det: list[torch.Tensor]
    drivable_logits: torch.Tensor
    lane_logits: torch.Tensor


def _bn(c: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(c, momentum=BN_MOMENTUM, eps=BN_EPS)


class ConvBnAct(nn.Module):
    """Conv + per-channel batch norm + SiLU, with optional fake-quant slots."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, s: int = 1, act: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, s, k // 2, bias=False)
        self.bn = _bn(c_out)
        self.act = nn.SiLU() if act else nn.Identity()
        self.weight_fq = None
        self.act_fq = None

    def forward(self, x):
        w = self.conv.weight
        if self.weight_fq is not None:
            w = self.weight_fq(w)
        y = F.conv2d(x, w, None, self.conv.stride, self.conv.padding)
        y = self.act(self.bn(y))
        if self.act_fq is not None:
            y = self.act_fq(y)
        return y


class HeadConv(nn.Module):
    """Plain 1x1 conv with bias emitting logits; weight-quantizable."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 1, bias=True)
        self.weight_fq = None

    def forward(self, x):
        w = self.conv.weight
        if self.weight_fq is not None:
            w = self.weight_fq(w)
        return F.conv2d(x, w, self.conv.bias)


def _fold_bn(weight: torch.Tensor, bn: nn.BatchNorm2d) -> tuple[torch.Tensor, torch.Tensor]:
    """Fold batch-norm statistics into an equivalent conv weight and bias."""
    std = torch.sqrt(bn.running_var + bn.eps)
    gain = bn.weight / std
    return weight * gain.reshape(-1, 1, 1, 1), bn.bias - bn.running_mean * gain


class RepConv(nn.Module):
    """Re-parameterizable conv block.

    Training form: 3x3 conv + 1x1 conv + (identity when shapes allow), each
    with its own batch norm, summed before the activation. ``fuse`` folds the
    branches into a single 3x3 conv; eval outputs agree within 1e-4.
    """

    def __init__(self, c_in: int, c_out: int, s: int = 1):
        super().__init__()
        self.c_in, self.c_out, self.stride = c_in, c_out, s
        self.dense = nn.Conv2d(c_in, c_out, 3, s, 1, bias=False)
        self.dense_bn = _bn(c_out)
        self.pw = nn.Conv2d(c_in, c_out, 1, s, 0, bias=False)
        self.pw_bn = _bn(c_out)
        self.id_bn = _bn(c_out) if (c_in == c_out and s == 1) else None
        self.fused = None
        self.act = nn.SiLU()
        self.weight_fq = None
        self.act_fq = None

    def forward(self, x):
        if self.fused is not None:
            w = self.fused.weight
            if self.weight_fq is not None:
                w = self.weight_fq(w)
            y = F.conv2d(x, w, self.fused.bias, self.stride, 1)
        else:
            y = self.dense_bn(self.dense(x)) + self.pw_bn(self.pw(x))
            if self.id_bn is not None:
                y = y + self.id_bn(x)
        y = self.act(y)
        if self.act_fq is not None:
            y = self.act_fq(y)
        return y

    @torch.no_grad()
    def fuse(self) -> None:
        """Collapse the branches into one 3x3 conv; idempotent."""
        if self.fused is not None:
            return
        w = torch.zeros(self.c_out, self.c_in, 3, 3)
        b = torch.zeros(self.c_out)
        dw, db = _fold_bn(self.dense.weight, self.dense_bn)
        w += dw
        b += db
        pw, pb = _fold_bn(F.pad(self.pw.weight, [1, 1, 1, 1]), self.pw_bn)
        w += pw
        b += pb
        if self.id_bn is not None:
            ident = torch.zeros(self.c_out, self.c_in, 3, 3)
            for i in range(self.c_out):
                ident[i, i, 1, 1] = 1.0
            iw, ib = _fold_bn(ident, self.id_bn)
            w += iw
            b += ib
        fused = nn.Conv2d(self.c_in, self.c_out, 3, self.stride, 1, bias=True)
        fused.weight.copy_(w)
        fused.bias.copy_(b)
        self.dense = None
        self.dense_bn = None
        self.pw = None
        self.pw_bn = None
        self.id_bn = None
        self.fused = fused


class ELANBlock(nn.Module):
    """Efficient layer aggregation: parallel taps concatenated, fused 1x1."""

    def __init__(self, c: int, depth_pairs: int = 2):
        super().__init__()
        mid = max(4, c // 2)
        self.cv1 = ConvBnAct(c, mid, 1)
        self.cv2 = ConvBnAct(c, mid, 1)
        self.blocks = nn.ModuleList(
            nn.Sequential(ConvBnAct(mid, mid, 3), ConvBnAct(mid, mid, 3))
            for _ in range(depth_pairs)
        )
        self.out = ConvBnAct((2 + depth_pairs) * mid, c, 1)

    def forward(self, x):
        taps = [self.cv1(x), self.cv2(x)]
        y = taps[-1]
        for blk in self.blocks:
            y = blk(y)
            taps.append(y)
        return self.out(torch.cat(taps, dim=1))


class SPPBlock(nn.Module):
    """Spatial pyramid pooling: parallel max-pools (5/9/13) concatenated."""

    def __init__(self, c: int, kernels: tuple[int, ...] = (5, 9, 13)):
        super().__init__()
        mid = max(4, c // 2)
        self.cv1 = ConvBnAct(c, mid, 1)
        self.pools = nn.ModuleList(nn.MaxPool2d(k, 1, k // 2) for k in kernels)
        self.cv2 = ConvBnAct(mid * (1 + len(kernels)), c, 1)

    def forward(self, x):
        y = self.cv1(x)
        return self.cv2(torch.cat([y] + [p(y) for p in self.pools], dim=1))


class DetHead(nn.Module):
    def __init__(self, c: int, num_anchors: int, num_outputs: int):
        super().__init__()
        self.num_anchors = num_anchors
        self.num_outputs = num_outputs
        self.rep1 = RepConv(c, c)
        self.rep2 = RepConv(c, c)
        self.out = HeadConv(c, num_anchors * num_outputs)

    def forward(self, x):
        y = self.out(self.rep2(self.rep1(x)))
        b, _, h, w = y.shape
        y = y.view(b, self.num_anchors, self.num_outputs, h, w)
        return y.permute(0, 3, 4, 1, 2).contiguous()


class SegHead(nn.Module):
    def __init__(self, c_in: int, num_classes: int):
        super().__init__()
        self.cv1 = ConvBnAct(c_in, 32, 3)
        self.cv2 = ConvBnAct(32, 16, 3)
        self.out = HeadConv(16, num_classes)

    def forward(self, x):
        return self.out(self.cv2(self.cv1(x))).permute(0, 2, 3, 1).contiguous()


class PerceptionNet(nn.Module):
    """Shared backbone with one detection head and two segmentation heads."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        wm = config.width_multiple
        depth = max(1, round(2 * config.depth_multiple))
        ch = [max(4, int(round(c * wm))) for c in (16, 32, 64, 128)]
        self.channels = ch

        self.stem = ConvBnAct(3, ch[0], 3, 2)
        self.stage1 = nn.Sequential(ConvBnAct(ch[0], ch[0], 3, 2), ELANBlock(ch[0], depth))
        self.stage2 = nn.Sequential(ConvBnAct(ch[0], ch[1], 3, 2), ELANBlock(ch[1], depth))
        self.stage3 = nn.Sequential(ConvBnAct(ch[1], ch[2], 3, 2), ELANBlock(ch[2], depth))
        self.stage4 = nn.Sequential(ConvBnAct(ch[2], ch[3], 3, 2), ELANBlock(ch[3], depth))

        self.spp = SPPBlock(ch[3])
        self.n5 = ELANBlock(ch[3], depth)
        self.lat4 = ConvBnAct(ch[3] + ch[2], ch[2], 1)
        self.n4 = ELANBlock(ch[2], depth)
        # The stride-8 scale carries all small objects; it gets the same
        # width as stride 16 rather than the thinner backbone width.
        n3_ch = ch[2]
        self.lat3 = ConvBnAct(ch[2] + ch[1], n3_ch, 1)
        self.n3 = ELANBlock(n3_ch, depth)

        n_out = 5 + config.num_det_classes
        self.det_heads = nn.ModuleList(
            DetHead(c, ANCHORS_PER_SCALE, n_out) for c in (n3_ch, ch[2], ch[3])
        )
        seg_in = n3_ch + ch[0]
        self.drivable_head = SegHead(seg_in, config.drivable_classes)
        self.lane_head = SegHead(seg_in, config.lane_classes)

        self.input_fq = None

    def forward(self, x: torch.Tensor) -> ModelOutputs:
        h, w = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != h or x.shape[3] != w:
            raise ValueError(f"expected batch shaped (B, 3, {h}, {w}), got {tuple(x.shape)}")
        if self.input_fq is not None:
            x = self.input_fq(x)
        c1 = self.stem(x)
        c2 = self.stage1(c1)
        c3 = self.stage2(c2)
        c4 = self.stage3(c3)
        c5 = self.stage4(c4)
        p5 = self.n5(self.spp(c5))
        p4 = self.n4(self.lat4(torch.cat([F.interpolate(p5, scale_factor=2.0, mode="nearest"), c4], 1)))
        p3 = self.n3(self.lat3(torch.cat([F.interpolate(p4, scale_factor=2.0, mode="nearest"), c3], 1)))
        det = [head(p) for head, p in zip(self.det_heads, (p3, p4, p5))]
        seg_in = torch.cat([F.interpolate(p3, scale_factor=2.0, mode="nearest"), c2], 1)
        return ModelOutputs(
            det=det,
            drivable_logits=self.drivable_head(seg_in),
            lane_logits=self.lane_head(seg_in),
        )

    @property
    def reparameterized(self) -> bool:
        reps = [m for m in self.modules() if isinstance(m, RepConv)]
        return all(m.fused is not None for m in reps)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build(config: NetworkConfig, seed: int = 0) -> PerceptionNet:
    """Construct and initialize the model deterministically from a seed."""
    torch.manual_seed(seed)
    model = PerceptionNet(config)
    # The detection logit conv starts near its priors: tiny weights so boxes
    # decode to the anchor shapes, plus a low-probability objectness/class
    # bias so early focal loss is not dominated by the background sea. Large
    # random head outputs at init destabilize the first high-lr epochs.
    with torch.no_grad():
        for head in model.det_heads:
            head.out.conv.weight.normal_(0.0, 0.01)
            bias = head.out.conv.bias.view(ANCHORS_PER_SCALE, head.num_outputs)
            bias[:, :4] = 0.0
            bias[:, 4:] = -2.0
    return model


def reparameterize(model: PerceptionNet) -> PerceptionNet:
    """Fuse every RepConv block in place; calling twice is a no-op."""
    for m in model.modules():
        if isinstance(m, RepConv):
            m.fuse()
    return model


# ---------------------------------------------------------------------------
# Checkpoint archive
# ---------------------------------------------------------------------------


def save_checkpoint(model: PerceptionNet, path: str | Path, extra_meta: dict | None = None) -> Path:
    """Write all parameters and buffers plus the build config as one archive."""
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "reparameterized": model.reparameterized,
    }
    if extra_meta:
        meta.update(extra_meta)
    return write_archive(path, meta, arrays)


def load_checkpoint(path: str | Path, prepare=None) -> PerceptionNet:
    """Rebuild the model recorded at ``path``.

    ``prepare`` is an optional callable run on the freshly built model before
    the weights load (used to re-attach quantization state).
    """
    meta, arrays = read_archive(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint (format={meta.get('format')!r})")
    model = build(NetworkConfig.from_dict(meta["config"]))
    if meta.get("reparameterized"):
        reparameterize(model)
    if prepare is not None:
        prepare(model, meta)
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model
