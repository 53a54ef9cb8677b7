"""Affine quantization: primitives, fake-quant with straight-through
gradients, PTQ calibration, QAT preparation, and INT8 export.

Conventions (fixed and documented because they change exported bits):
  * rounding is half-away-from-zero;
  * symmetric range for b bits is ``[-(2^(b-1) - 1), 2^(b-1) - 1]`` with
    zero_point 0; asymmetric is ``[0, 2^b - 1]``;
  * weights quantize per-output-channel symmetric, activations per-tensor
    asymmetric (range always stretched to include zero);
  * the straight-through estimator is clipped: gradients pass where the
    input lies inside the representable real range and are zero outside.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archive import read_archive, write_archive
from .network import (
    ConvBnAct,
    HeadConv,
    NetworkConfig,
    PerceptionNet,
    RepConv,
    build,
    reparameterize,
)

_SCALE_FLOOR = 1e-8

INT8_FORMAT = "panoptiq-int8/1"


class ExportError(ValueError):
    """INT8 export failed validation."""


def _range_for(bit_width: int, scheme: str) -> tuple[int, int]:
    if scheme == "symmetric":
        m = 2 ** (bit_width - 1) - 1
        return -m, m
    if scheme == "asymmetric":
        return 0, 2**bit_width - 1
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass(frozen=True)
class QuantSpec:
    """Scale/zero-point/bit-width/granularity for one tensor."""

    bit_width: int = 8
    scheme: str = "symmetric"
    granularity: str = "per-tensor"
    axis: int | None = None
    scale: float | np.ndarray = 1.0
    zero_point: int | np.ndarray = 0

    def __post_init__(self):
        if self.granularity not in ("per-tensor", "per-channel"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        qmin, qmax = _range_for(self.bit_width, self.scheme)
        scale = np.asarray(self.scale, dtype=np.float64)
        zp = np.asarray(self.zero_point, dtype=np.int64)
        if np.any(scale <= 0):
            raise ValueError("scale must be positive")
        if np.any(zp < qmin) or np.any(zp > qmax):
            raise ValueError(f"zero_point outside [{qmin}, {qmax}]")
        if self.scheme == "symmetric" and np.any(zp != 0):
            raise ValueError("symmetric scheme requires zero_point 0")
        if self.granularity == "per-channel":
            if self.axis is None:
                raise ValueError("per-channel spec needs an axis")
            if scale.ndim != 1 or zp.ndim not in (0, 1):
                raise ValueError("per-channel spec needs 1-D scale")
        elif scale.ndim != 0:
            raise ValueError("per-tensor spec needs a scalar scale")

    @property
    def qmin(self) -> int:
        return _range_for(self.bit_width, self.scheme)[0]

    @property
    def qmax(self) -> int:
        return _range_for(self.bit_width, self.scheme)[1]

    def to_dict(self) -> dict:
        scale = self.scale.tolist() if isinstance(self.scale, np.ndarray) else self.scale
        zp = self.zero_point.tolist() if isinstance(self.zero_point, np.ndarray) else self.zero_point
        return {
            "bit_width": self.bit_width,
            "scheme": self.scheme,
            "granularity": self.granularity,
            "axis": self.axis,
            "scale": scale,
            "zero_point": zp,
        }

    @staticmethod
    def from_dict(doc: dict) -> "QuantSpec":
        scale = doc["scale"]
        zp = doc["zero_point"]
        if isinstance(scale, list):
            scale = np.asarray(scale, dtype=np.float64)
        if isinstance(zp, list):
            zp = np.asarray(zp, dtype=np.int64)
        return QuantSpec(
            bit_width=doc["bit_width"],
            scheme=doc["scheme"],
            granularity=doc["granularity"],
            axis=doc.get("axis"),
            scale=scale,
            zero_point=zp,
        )


def _broadcast(value, ndim: int, axis: int | None, dtype) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0 or axis is None:
        return arr
    shape = [1] * ndim
    shape[axis] = -1
    return arr.reshape(shape)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.floor(np.abs(v) + 0.5) * np.sign(v)


def quantize(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """``clamp(round(x / scale) + zero_point, qmin, qmax)`` as int32."""
    x = np.asarray(x)
    s = _broadcast(spec.scale, x.ndim, spec.axis, x.dtype)
    zp = _broadcast(spec.zero_point, x.ndim, spec.axis, x.dtype)
    q = _round_half_away(x / s) + zp
    return np.clip(q, spec.qmin, spec.qmax).astype(np.int32)


def dequantize(q: np.ndarray, spec: QuantSpec, dtype=np.float32) -> np.ndarray:
    """``(q - zero_point) * scale``."""
    q = np.asarray(q)
    s = _broadcast(spec.scale, q.ndim, spec.axis, dtype)
    zp = _broadcast(spec.zero_point, q.ndim, spec.axis, dtype)
    return ((q.astype(dtype) - zp) * s).astype(dtype)


def fake_quant_forward(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Quantize then dequantize; output lies on the quantization lattice."""
    x = np.asarray(x)
    return dequantize(quantize(x, spec), spec, dtype=x.dtype)


def representable_range(spec: QuantSpec, ndim: int, dtype=np.float64):
    """Real-valued (lo, hi) the lattice can represent, broadcastable to ndim."""
    s = _broadcast(spec.scale, ndim, spec.axis, dtype)
    zp = _broadcast(spec.zero_point, ndim, spec.axis, dtype)
    return (spec.qmin - zp) * s, (spec.qmax - zp) * s


def fake_quant_backward(
    upstream_grad: np.ndarray, x: np.ndarray, spec: QuantSpec
) -> np.ndarray:
    """Clipped straight-through gradient: pass inside the representable
    range, zero outside."""
    x = np.asarray(x)
    lo, hi = representable_range(spec, x.ndim, x.dtype)
    mask = (x >= lo) & (x <= hi)
    return np.asarray(upstream_grad) * mask


# ---------------------------------------------------------------------------
# Spec construction
# ---------------------------------------------------------------------------


def spec_from_min_max(min_val: float, max_val: float, bit_width: int = 8) -> QuantSpec:
    """Per-tensor asymmetric spec covering [min, max] stretched to include 0."""
    lo = min(float(min_val), 0.0)
    hi = max(float(max_val), 0.0)
    qmin, qmax = _range_for(bit_width, "asymmetric")
    scale = max((hi - lo) / (qmax - qmin), _SCALE_FLOOR)
    zp = int(np.clip(round(qmin - lo / scale), qmin, qmax))
    return QuantSpec(bit_width, "asymmetric", "per-tensor", None, scale, zp)


def spec_from_weight(weight: np.ndarray, bit_width: int = 8, axis: int = 0) -> QuantSpec:
    """Per-channel symmetric spec from a weight tensor's max magnitude."""
    w = np.asarray(weight, dtype=np.float64)
    reduce_dims = tuple(d for d in range(w.ndim) if d != axis)
    maxabs = np.abs(w).max(axis=reduce_dims) if reduce_dims else np.abs(w)
    qmax = _range_for(bit_width, "symmetric")[1]
    scale = np.maximum(maxabs / qmax, _SCALE_FLOOR)
    zp = np.zeros(scale.shape, dtype=np.int64)
    return QuantSpec(bit_width, "symmetric", "per-channel", axis, scale, zp)


@dataclass
class CalibrationState:
    """Running min/max of one tensor: plain extrema (PTQ) or EMA (QAT)."""

    mode: str = "minmax"  # or "ema"
    momentum: float = 0.99
    min_val: float = 0.0
    max_val: float = 0.0
    count: int = 0

    def observe(self, batch_min: float, batch_max: float) -> None:
        if self.count == 0:
            self.min_val, self.max_val = float(batch_min), float(batch_max)
        elif self.mode == "minmax":
            self.min_val = min(self.min_val, float(batch_min))
            self.max_val = max(self.max_val, float(batch_max))
        else:
            m = self.momentum
            self.min_val = m * self.min_val + (1.0 - m) * float(batch_min)
            self.max_val = m * self.max_val + (1.0 - m) * float(batch_max)
        self.count += 1

    def to_spec(self, bit_width: int = 8) -> QuantSpec:
        if self.count == 0:
            raise ValueError("no observations recorded")
        return spec_from_min_max(self.min_val, self.max_val, bit_width)


# ---------------------------------------------------------------------------
# Torch fake-quant (training path)
# ---------------------------------------------------------------------------


class _FakeQuantFunction(torch.autograd.Function):
    """Quantize-dequantize with a clipped STE.

    The input gradient passes exactly where x lies within the representable
    real range. The scale gradient (used when scales are learnable) is the
    analytic derivative treating rounding as straight-through.
    """

    @staticmethod
    def forward(ctx, x, scale, zero_point, qmin, qmax):
        v = x / scale
        r = torch.floor(v.abs() + 0.5) * torch.sign(v)
        q = torch.clamp(r + zero_point, qmin, qmax)
        y = (q - zero_point) * scale
        ctx.save_for_backward(x, scale, zero_point, r)
        ctx.qmin, ctx.qmax = qmin, qmax
        return y

    @staticmethod
    def backward(ctx, grad_out):
        x, scale, zp, r = ctx.saved_tensors
        lo = (ctx.qmin - zp) * scale
        hi = (ctx.qmax - zp) * scale
        in_range = (x >= lo) & (x <= hi)
        grad_x = grad_out * in_range
        grad_scale = None
        if ctx.needs_input_grad[1]:
            gs = torch.where(
                in_range,
                r - x / scale,
                torch.where(x < lo, (ctx.qmin - zp), (ctx.qmax - zp)).to(x.dtype),
            ) * grad_out
            # reduce over broadcast dims back to the scale's shape
            while gs.ndim > scale.ndim:
                gs = gs.sum(0)
            for d in range(scale.ndim):
                if scale.shape[d] == 1 and gs.shape[d] != 1:
                    gs = gs.sum(d, keepdim=True)
            grad_scale = gs
        return grad_x, grad_scale, None, None, None


def _torch_broadcast_shape(ndim: int, axis: int | None):
    if axis is None:
        return ()
    shape = [1] * ndim
    shape[axis] = -1
    return tuple(shape)


class FakeQuantize(nn.Module):
    """Fake-quantization node usable on weights or activations.

    Modes:
      * ``dynamic``   per-channel symmetric; spec recomputed from the current
                      tensor every call (weights);
      * ``ema``       per-tensor asymmetric; EMA min/max observer updated in
                      train mode (activations under QAT);
      * ``frozen``    fixed spec supplied up front (PTQ simulation / reload);
      * ``learnable`` like ``ema`` but the scale trains after initialization.
    """

    def __init__(
        self,
        mode: str,
        bit_width: int = 8,
        axis: int = 0,
        ema_momentum: float = 0.99,
        spec: QuantSpec | None = None,
        enabled: bool = True,
    ):
        super().__init__()
        if mode not in ("dynamic", "ema", "frozen", "learnable"):
            raise ValueError(f"unknown fake-quant mode {mode!r}")
        self.mode = mode
        self.bit_width = bit_width
        self.axis = axis
        self.ema_momentum = ema_momentum
        self.enabled = enabled
        self.scheme = "symmetric" if mode == "dynamic" else "asymmetric"
        if spec is not None:  # frozen nodes adopt the spec's layout
            self.bit_width = spec.bit_width
            self.scheme = spec.scheme
            if spec.axis is not None:
                self.axis = spec.axis
        self.qmin, self.qmax = _range_for(self.bit_width, self.scheme)
        self.register_buffer("min_val", torch.zeros(()))
        self.register_buffer("max_val", torch.zeros(()))
        self.register_buffer("count", torch.zeros((), dtype=torch.int64))
        self.register_buffer("zero_point", torch.zeros(()))
        if mode == "learnable":
            self.scale = nn.Parameter(torch.ones(()))
        else:
            self.register_buffer("scale", torch.ones(()))
        if spec is not None:
            self._load_spec(spec)

    def _load_spec(self, spec: QuantSpec) -> None:
        if spec.scheme != self.scheme or spec.bit_width != self.bit_width:
            raise ValueError("spec does not match this fake-quant node")
        shape = _torch_broadcast_shape(4, spec.axis) if spec.granularity == "per-channel" else ()
        with torch.no_grad():
            s = torch.as_tensor(np.asarray(spec.scale, dtype=np.float32)).reshape(shape or ())
            z = torch.as_tensor(np.asarray(spec.zero_point, dtype=np.float32)).reshape(shape or ())
            if isinstance(self.scale, nn.Parameter):
                self.scale.data = s
            else:
                self.scale = s
            self.zero_point = z
            self.count.fill_(1)

    def _observe(self, x: torch.Tensor) -> None:
        mn = float(x.detach().min())
        mx = float(x.detach().max())
        if int(self.count) == 0:
            self.min_val.fill_(mn)
            self.max_val.fill_(mx)
        else:
            m = self.ema_momentum
            self.min_val.mul_(m).add_((1.0 - m) * mn)
            self.max_val.mul_(m).add_((1.0 - m) * mx)
        self.count += 1
        spec = spec_from_min_max(float(self.min_val), float(self.max_val), self.bit_width)
        with torch.no_grad():
            if isinstance(self.scale, nn.Parameter):
                self.scale.data = torch.tensor(float(spec.scale))
            else:
                self.scale = torch.tensor(float(spec.scale))
            self.zero_point = torch.tensor(float(spec.zero_point))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            return x
        if self.mode == "dynamic":
            dims = tuple(d for d in range(x.ndim) if d != self.axis)
            maxabs = x.detach().abs().amax(dim=dims, keepdim=True)
            scale = (maxabs / self.qmax).clamp(min=_SCALE_FLOOR)
            zp = torch.zeros_like(scale)
            return _FakeQuantFunction.apply(x, scale, zp, self.qmin, self.qmax)
        if self.mode in ("ema", "learnable") and self.training:
            if self.mode == "ema" or int(self.count) == 0:
                self._observe(x)
        if int(self.count) == 0:
            return x  # never observed; pass through untouched
        scale = self.scale.clamp(min=_SCALE_FLOOR) if isinstance(self.scale, nn.Parameter) else self.scale
        return _FakeQuantFunction.apply(
            x, scale.to(x.dtype), self.zero_point.to(x.dtype), self.qmin, self.qmax
        )

    def to_spec(self) -> QuantSpec:
        """Freeze the node's current parameters as a QuantSpec."""
        if int(self.count) == 0:
            raise ValueError("fake-quant node was never observed/initialized")
        scale = self.scale.detach().cpu().numpy()
        zp = self.zero_point.detach().cpu().numpy()
        if scale.ndim == 0:
            return QuantSpec(self.bit_width, self.scheme, "per-tensor", None,
                             float(max(scale, _SCALE_FLOOR)), int(round(float(zp))))
        return QuantSpec(
            self.bit_width, self.scheme, "per-channel", self.axis,
            scale.reshape(-1).astype(np.float64),
            np.round(zp.reshape(-1)).astype(np.int64),
        )


# ---------------------------------------------------------------------------
# Model instrumentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantConfig:
    bit_width: int = 8
    scale_mode: str = "ema"  # "ema" | "frozen" | "learnable"
    ema_momentum: float = 0.99
    exempt_first_last: bool = False
    enabled: bool = True

    def __post_init__(self):
        if self.scale_mode not in ("ema", "frozen", "learnable"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")
        if not 2 <= self.bit_width <= 32:
            raise ValueError("bit_width must be in [2, 32]")


def _quantizable_modules(model: PerceptionNet) -> list[tuple[str, nn.Module]]:
    out = []
    for name, m in model.named_modules():
        if isinstance(m, (ConvBnAct, RepConv, HeadConv)):
            out.append((name, m))
    return out


def _exempt_names(model: PerceptionNet) -> set[str]:
    """First layer (stem) and the final logit convs."""
    names = {"stem"}
    for name, m in model.named_modules():
        if isinstance(m, HeadConv):
            names.add(name)
    return names


def _weight_key(name: str, module: nn.Module) -> str:
    return f"{name}.fused.weight" if isinstance(module, RepConv) else f"{name}.conv.weight"


def prepare_qat(model: PerceptionNet, qcfg: QuantConfig | None = None) -> PerceptionNet:
    """Attach fake-quant nodes for quantization-aware training.

    RepConv blocks are fused first so QAT trains the deployment-form single
    convs. Weights get dynamic per-channel symmetric nodes; every activation
    feeding a quantized op (the input image and each block output) gets an
    observed per-tensor asymmetric node.
    """
    qcfg = qcfg or QuantConfig()
    reparameterize(model)
    act_mode = "learnable" if qcfg.scale_mode == "learnable" else "ema"
    exempt = _exempt_names(model) if qcfg.exempt_first_last else set()
    for name, m in _quantizable_modules(model):
        if name in exempt:
            continue
        m.weight_fq = FakeQuantize(
            "dynamic", qcfg.bit_width, axis=0, enabled=qcfg.enabled
        )
        if not isinstance(m, HeadConv):  # logits feed no quantized op
            m.act_fq = FakeQuantize(
                act_mode, qcfg.bit_width, ema_momentum=qcfg.ema_momentum, enabled=qcfg.enabled
            )
    model.input_fq = FakeQuantize(
        act_mode, qcfg.bit_width, ema_momentum=qcfg.ema_momentum, enabled=qcfg.enabled
    )
    return model


def set_fake_quant_enabled(model: PerceptionNet, enabled: bool) -> None:
    for m in model.modules():
        if isinstance(m, FakeQuantize):
            m.enabled = enabled
    if model.input_fq is not None:
        model.input_fq.enabled = enabled


@dataclass
class ModelSpecs:
    """Quantization specs for a whole model, keyed by state-dict path
    (weights) and module path (activations). ``input`` is the image tensor."""

    weights: dict[str, QuantSpec]
    activations: dict[str, QuantSpec]
    exempt: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "weights": {k: v.to_dict() for k, v in self.weights.items()},
            "activations": {k: v.to_dict() for k, v in self.activations.items()},
            "exempt": list(self.exempt),
        }

    @staticmethod
    def from_dict(doc: dict) -> "ModelSpecs":
        return ModelSpecs(
            weights={k: QuantSpec.from_dict(v) for k, v in doc["weights"].items()},
            activations={k: QuantSpec.from_dict(v) for k, v in doc["activations"].items()},
            exempt=tuple(doc.get("exempt", ())),
        )


def calibrate_ptq(
    model: PerceptionNet,
    batches: list[torch.Tensor],
    qcfg: QuantConfig | None = None,
) -> ModelSpecs:
    """Post-training calibration: observe activation extrema, read weights.

    The model is fused to deployment form, run in eval mode over the
    calibration batches with plain min/max observers, and per-tensor
    activation specs plus per-channel weight specs are returned.
    Deterministic given batch order.
    """
    if len(batches) == 0:
        raise ValueError("calibration requires at least one batch")
    qcfg = qcfg or QuantConfig()
    reparameterize(model)
    model.eval()

    modules = [(n, m) for n, m in _quantizable_modules(model)]
    exempt = _exempt_names(model) if qcfg.exempt_first_last else set()
    states: dict[str, CalibrationState] = {}
    hooks = []

    def make_hook(key):
        def hook(_mod, _inp, out):
            states[key].observe(float(out.detach().min()), float(out.detach().max()))
        return hook

    for name, m in modules:
        if name in exempt or isinstance(m, HeadConv):
            continue
        states[name] = CalibrationState(mode="minmax")
        hooks.append(m.register_forward_hook(make_hook(name)))
    states["input"] = CalibrationState(mode="minmax")

    with torch.no_grad():
        for batch in batches:
            states["input"].observe(float(batch.min()), float(batch.max()))
            model(batch)
    for h in hooks:
        h.remove()

    params = dict(model.named_parameters())
    weights = {}
    exempt_keys = []
    for name, m in modules:
        key = _weight_key(name, m)
        if name in exempt:
            exempt_keys.append(key)
            continue
        weights[key] = spec_from_weight(params[key].detach().cpu().numpy(), qcfg.bit_width, axis=0)
    activations = {k: s.to_spec(qcfg.bit_width) for k, s in states.items()}
    return ModelSpecs(weights=weights, activations=activations, exempt=tuple(exempt_keys))


def collect_specs(model: PerceptionNet, qcfg: QuantConfig | None = None) -> ModelSpecs:
    """Freeze the specs of a QAT-prepared model (weights from current values,
    activations from their observers)."""
    qcfg = qcfg or QuantConfig()
    params = dict(model.named_parameters())
    weights = {}
    activations = {}
    exempt_keys = []
    for name, m in _quantizable_modules(model):
        key = _weight_key(name, m)
        if getattr(m, "weight_fq", None) is None:
            exempt_keys.append(key)
        else:
            weights[key] = spec_from_weight(
                params[key].detach().cpu().numpy(), qcfg.bit_width, axis=0
            )
        if getattr(m, "act_fq", None) is not None:
            activations[name] = m.act_fq.to_spec()
    if model.input_fq is not None:
        activations["input"] = model.input_fq.to_spec()
    return ModelSpecs(weights=weights, activations=activations, exempt=tuple(exempt_keys))


def apply_specs(model: PerceptionNet, specs: ModelSpecs) -> PerceptionNet:
    """Attach frozen fake-quant nodes everywhere the specs name a tensor.

    Running the returned model simulates INT8 inference (PTQ or reloaded
    QAT) without integer kernels.
    """
    for name, m in _quantizable_modules(model):
        key = _weight_key(name, m)
        if key in specs.weights:
            m.weight_fq = FakeQuantize("frozen", specs.weights[key].bit_width,
                                       axis=0, spec=specs.weights[key])
        if name in specs.activations and not isinstance(m, HeadConv):
            m.act_fq = FakeQuantize("frozen", spec=specs.activations[name])
    if "input" in specs.activations:
        model.input_fq = FakeQuantize("frozen", spec=specs.activations["input"])
    return model


# ---------------------------------------------------------------------------
# INT8 export / reload
# ---------------------------------------------------------------------------

_FQ_MARKERS = (".weight_fq.", ".act_fq.", "input_fq.")


def _is_fq_state(key: str) -> bool:
    return any(marker in key or key.startswith(marker) for marker in _FQ_MARKERS)


def export_int8(model: PerceptionNet, specs: ModelSpecs, path: str | Path) -> Path:
    """Write weights as 8-bit integers plus spec metadata.

    Every >=2-D parameter must have a weight spec unless listed as exempt;
    exempt and 1-D tensors are stored as float32. Layout per ``archive``:
    int8 blobs under the tensor name, with ``<name>::scale`` (float32) and
    ``<name>::zero_point`` (int32) alongside.
    """
    state = model.state_dict()
    arrays: dict[str, np.ndarray] = {}
    quantized = []
    missing = []
    for key, tensor in state.items():
        if _is_fq_state(key):
            continue  # observer state lives in the spec metadata instead
        arr = tensor.detach().cpu().numpy()
        if arr.ndim >= 2 and key.endswith("weight"):
            spec = specs.weights.get(key)
            if spec is None:
                if key in specs.exempt:
                    arrays[key] = arr.astype(np.float32)
                    continue
                missing.append(key)
                continue
            q = quantize(arr, spec).astype(np.int8)
            arrays[key] = q
            arrays[f"{key}::scale"] = np.atleast_1d(np.asarray(spec.scale, dtype=np.float32))
            if spec.scheme != "symmetric":  # symmetric => zero_point identically 0
                arrays[f"{key}::zero_point"] = np.atleast_1d(
                    np.asarray(spec.zero_point, dtype=np.int32)
                )
            quantized.append(key)
        elif arr.dtype == np.int64:
            arrays[key] = arr
        else:
            arrays[key] = arr.astype(np.float32)
    if missing:
        raise ExportError(f"missing quantization spec for: {', '.join(sorted(missing))}")
    # Weight scale/zero-point values live in the binary entries; the manifest
    # keeps only their structure (duplicating per-channel vectors as JSON
    # would dominate the archive size).
    weight_layout = {
        k: {"bit_width": v.bit_width, "scheme": v.scheme,
            "granularity": v.granularity, "axis": v.axis}
        for k, v in specs.weights.items()
    }
    meta = {
        "format": INT8_FORMAT,
        "config": model.config.to_dict(),
        "reparameterized": model.reparameterized,
        "quantized": quantized,
        "weight_layout": weight_layout,
        "activations": {k: v.to_dict() for k, v in specs.activations.items()},
        "exempt": list(specs.exempt),
    }
    return write_archive(path, meta, arrays)


def load_int8(path: str | Path) -> PerceptionNet:
    """Rebuild an INT8 archive as a fake-quant simulation model.

    Integer weights are dequantized into the float model and frozen
    activation fake-quant nodes are re-attached, so eval reproduces the
    exported quantized behavior exactly.
    """
    meta, arrays = read_archive(path)
    if meta.get("format") != INT8_FORMAT:
        raise ValueError(f"{path} is not an INT8 archive (format={meta.get('format')!r})")
    weights = {}
    for key, layout in meta["weight_layout"].items():
        scale = arrays[f"{key}::scale"].astype(np.float64)
        zp_key = f"{key}::zero_point"
        zp = arrays[zp_key].astype(np.int64) if zp_key in arrays else np.zeros_like(scale, dtype=np.int64)
        if layout["granularity"] == "per-tensor":
            scale, zp = float(scale[0]), int(zp[0])
        weights[key] = QuantSpec(
            layout["bit_width"], layout["scheme"], layout["granularity"],
            layout["axis"], scale, zp,
        )
    specs = ModelSpecs(
        weights=weights,
        activations={k: QuantSpec.from_dict(v) for k, v in meta["activations"].items()},
        exempt=tuple(meta.get("exempt", ())),
    )
    model = build(NetworkConfig.from_dict(meta["config"]))
    if meta.get("reparameterized"):
        reparameterize(model)
    state = {}
    for key in list(arrays):
        if "::" in key:
            continue
        arr = arrays[key]
        if key in meta["quantized"]:
            arr = dequantize(arr, specs.weights[key])
        if arr.dtype == np.int64:
            state[key] = torch.from_numpy(arr)
        else:
            state[key] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    apply_specs(model, specs)
    model.eval()
    return model


def load_model(path: str | Path) -> PerceptionNet:
    """Load either a float checkpoint or an INT8 archive by format tag."""
    from .network import CHECKPOINT_FORMAT, load_checkpoint

    meta, _ = read_archive(path)
    fmt = meta.get("format")
    if fmt == INT8_FORMAT:
        return load_int8(path)
    if fmt == CHECKPOINT_FORMAT:
        if meta.get("qat"):
            qcfg_doc = meta.get("quant") or {}
            qcfg = QuantConfig(**qcfg_doc)
            return load_checkpoint(path, prepare=lambda m, _meta: prepare_qat(m, qcfg))
        return load_checkpoint(path)
    raise ValueError(f"unrecognized archive format {fmt!r}")
