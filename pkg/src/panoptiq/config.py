"""One run configuration document: schema, presets, (de)serialization.

A run config is a single JSON object validated against ``CONFIG_SCHEMA``
before any work starts. Relative manifest paths are resolved against the
config file's directory (or the current directory for bare presets).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jsonschema

from .augment import AugmentConfig
from .losses import LossWeights
from .network import ConfigError, FULL_SCALE_INPUT, NetworkConfig
from .postprocess import InferenceConfig
from .quantization import QuantConfig
from .trainer import StageConfig, TrainSchedule

PRESETS = ("toy", "paper-scale")

_NONNEG = {"type": "number", "minimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}

_STAGE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "epochs", "batch_size", "lr_init", "lr_min"],
    "properties": {
        "name": {"enum": ["pretrain1", "pretrain2", "finetune", "qat"]},
        "epochs": _POS_INT,
        "batch_size": _POS_INT,
        "lr_init": {"type": "number", "exclusiveMinimum": 0},
        "lr_min": {"type": "number", "exclusiveMinimum": 0},
        "warmup_epochs": {"type": "integer", "minimum": 0},
        "mosaic": {"type": "boolean"},
        "mosaic_off_tail": {"type": "integer", "minimum": 0},
        "datasets": {"type": "array", "items": {"type": "string"}},
        "qat_enabled": {"type": "boolean"},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "input_size": {
                    "type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2,
                },
                "width_multiple": {"type": "number", "exclusiveMinimum": 0},
                "depth_multiple": {"type": "number", "exclusiveMinimum": 0},
                "num_det_classes": _POS_INT,
                "drivable_classes": _POS_INT,
                "lane_classes": _POS_INT,
                "anchors": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "items": {"type": "number", "exclusiveMinimum": 0},
                        "minItems": 2,
                        "maxItems": 2,
                    },
                    "minItems": 9,
                    "maxItems": 9,
                },
            },
        },
        "augment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "normalize_mean": {"type": "array", "items": {"type": "number"}},
                "normalize_std": {"type": "array", "items": {"type": "number"}},
                "perspective_scale": _NONNEG,
                "translate": _NONNEG,
                "hsv_h": _NONNEG,
                "hsv_s": _NONNEG,
                "hsv_v": _NONNEG,
                "flip_prob": {"type": "number", "minimum": 0, "maximum": 1},
                "mosaic_enabled": {"type": "boolean"},
                "rng_seed": {"type": "integer"},
            },
        },
        "loss_weights": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                **{
                    k: _NONNEG
                    for k in (
                        "alpha1", "alpha2", "alpha3",
                        "beta1", "beta2", "beta3",
                        "gamma1", "gamma2",
                        "delta1", "delta2", "delta3",
                        "focal_gamma", "focal_alpha",
                        "tversky_alpha", "tversky_beta",
                    )
                },
                "obj_iou_weighted": {"type": "boolean"},
            },
        },
        "quantization": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bit_width": {"type": "integer", "minimum": 2, "maximum": 32},
                "scale_mode": {"enum": ["ema", "frozen", "learnable"]},
                "ema_momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "exempt_first_last": {"type": "boolean"},
                "enabled": {"type": "boolean"},
            },
        },
        "inference": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "nms_iou": {"type": "number", "minimum": 0, "maximum": 1},
                "conf_threshold": _NONNEG,
                "output_size": {
                    "type": ["array", "null"], "items": _POS_INT, "minItems": 2, "maxItems": 2,
                },
            },
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stages": {"type": "array", "items": _STAGE_SCHEMA},
                "eval_every": {"type": "integer", "minimum": 0},
                "grad_clip_norm": _NONNEG,
                "use_weight_ema": {"type": "boolean"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"val_manifest": {"type": ["string", "null"]}},
        },
    },
}


@dataclass
class RunConfig:
    """The full configuration for a run, one section per subsystem."""

    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    quantization: QuantConfig = field(default_factory=QuantConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    stages: tuple[StageConfig, ...] = ()
    eval_every: int = 1
    grad_clip_norm: float = 10.0
    use_weight_ema: bool = False
    val_manifest: str | None = None

    def to_schedule(self) -> TrainSchedule:
        return TrainSchedule(
            stages=self.stages,
            seed=self.seed,
            network=self.network,
            augment=self.augment,
            loss_weights=self.loss_weights,
            quant=self.quantization,
            val_manifest=self.val_manifest,
            eval_every=self.eval_every,
            grad_clip_norm=self.grad_clip_norm,
            use_weight_ema=self.use_weight_ema,
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "network": self.network.to_dict(),
            "augment": asdict(self.augment),
            "loss_weights": asdict(self.loss_weights),
            "quantization": asdict(self.quantization),
            "inference": {
                "nms_iou": self.inference.nms_iou,
                "conf_threshold": self.inference.conf_threshold,
                "output_size": list(self.inference.output_size)
                if self.inference.output_size
                else None,
            },
            "schedule": {
                "stages": [asdict(s) | {"datasets": list(s.datasets)} for s in self.stages],
                "eval_every": self.eval_every,
                "grad_clip_norm": self.grad_clip_norm,
                "use_weight_ema": self.use_weight_ema,
            },
            "data": {"val_manifest": self.val_manifest},
        }


def validate_config(doc: dict) -> None:
    """Schema-check a raw config document; errors carry the offending path."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config key {path}: {e.message}") from e


def _resolve(path: str | None, base: Path | None) -> str | None:
    if path is None or base is None:
        return path
    p = Path(path)
    return str(p if p.is_absolute() else (base / p))


def config_from_dict(doc: dict, base_dir: Path | None = None) -> RunConfig:
    """Build a validated RunConfig; relative paths resolve against base_dir."""
    validate_config(doc)
    cfg = RunConfig()
    if "seed" in doc:
        cfg.seed = doc["seed"]
    if "network" in doc:
        merged = {**cfg.network.to_dict(), **doc["network"]}
        if "anchors" not in doc["network"] and "input_size" in doc["network"]:
            merged.pop("anchors", None)  # rescale the default anchors instead
        cfg.network = NetworkConfig.from_dict(merged)
    if "augment" in doc:
        merged = asdict(cfg.augment) | doc["augment"]
        for k in ("normalize_mean", "normalize_std"):
            merged[k] = tuple(merged[k])
        cfg.augment = AugmentConfig(**merged)
    if "loss_weights" in doc:
        cfg.loss_weights = LossWeights(**(asdict(cfg.loss_weights) | doc["loss_weights"]))
    if "quantization" in doc:
        cfg.quantization = QuantConfig(**(asdict(cfg.quantization) | doc["quantization"]))
    if "inference" in doc:
        inf = doc["inference"]
        cfg.inference = InferenceConfig(
            nms_iou=inf.get("nms_iou", cfg.inference.nms_iou),
            conf_threshold=inf.get("conf_threshold", cfg.inference.conf_threshold),
            output_size=tuple(inf["output_size"]) if inf.get("output_size") else None,
        )
    sched = doc.get("schedule", {})
    stages = []
    for s in sched.get("stages", []):
        s = dict(s)
        s["datasets"] = tuple(_resolve(d, base_dir) for d in s.get("datasets", ()))
        stages.append(StageConfig(**s))
    cfg.stages = tuple(stages)
    cfg.eval_every = sched.get("eval_every", cfg.eval_every)
    cfg.grad_clip_norm = sched.get("grad_clip_norm", cfg.grad_clip_norm)
    cfg.use_weight_ema = sched.get("use_weight_ema", cfg.use_weight_ema)
    data = doc.get("data", {})
    cfg.val_manifest = _resolve(data.get("val_manifest"), base_dir)
    # surface cross-field violations (e.g. qat not last) now, not mid-run
    cfg.to_schedule()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    return config_from_dict(doc, base_dir=path.parent.resolve())


def _toy_stages() -> tuple[StageConfig, ...]:
    train = "data/train/manifest.json"
    extra = "data/extra/manifest.json"
    return (
        StageConfig("pretrain1", 60, 8, 1e-2, 1e-5, warmup_epochs=5, mosaic=False,
                    datasets=(train,)),
        StageConfig("pretrain2", 30, 8, 5e-3, 5e-6, warmup_epochs=5, mosaic=True,
                    datasets=(train,)),
        StageConfig("finetune", 30, 8, 5e-4, 5e-7, warmup_epochs=0, mosaic=True,
                    mosaic_off_tail=2, datasets=(train, extra)),
        StageConfig("qat", 10, 8, 5e-5, 5e-8, warmup_epochs=0, mosaic=False,
                    datasets=(train, extra), qat_enabled=True),
    )


def _paper_scale_stages() -> tuple[StageConfig, ...]:
    train = "data/train/manifest.json"
    extra = "data/extra/manifest.json"
    return (
        StageConfig("pretrain1", 300, 32, 1e-2, 1e-5, warmup_epochs=5, mosaic=False,
                    datasets=(train,)),
        StageConfig("pretrain2", 150, 32, 5e-3, 5e-6, warmup_epochs=5, mosaic=True,
                    datasets=(train,)),
        StageConfig("finetune", 150, 32, 5e-4, 5e-7, warmup_epochs=0, mosaic=True,
                    mosaic_off_tail=10, datasets=(train, extra)),
        StageConfig("qat", 20, 16, 5e-5, 5e-8, warmup_epochs=0, mosaic=False,
                    datasets=(train, extra), qat_enabled=True),
    )


def make_preset(name: str, base_dir: Path | None = None) -> RunConfig:
    """Built-in starting configs: ``toy`` (desk scale) and ``paper-scale``."""
    if name == "toy":
        cfg = RunConfig(stages=_toy_stages(), val_manifest="data/val/manifest.json")
    elif name == "paper-scale":
        cfg = RunConfig(
            network=NetworkConfig(input_size=FULL_SCALE_INPUT),
            stages=_paper_scale_stages(),
            val_manifest="data/val/manifest.json",
        )
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    if base_dir is not None:
        stages = tuple(
            replace(s, datasets=tuple(_resolve(d, base_dir) for d in s.datasets))
            for s in cfg.stages
        )
        cfg.stages = stages
        cfg.val_manifest = _resolve(cfg.val_manifest, base_dir)
    return cfg
