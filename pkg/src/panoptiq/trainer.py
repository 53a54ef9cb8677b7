"""Staged training driver.

Four-stage recipe: pretraining without mosaic, pretraining with mosaic,
mixed-data finetuning, then quantization-aware training, each with its own
batch size and cosine-annealed learning rate (linear warmup from
``lr_init/100``). Adam with moment coefficients (0.9, 0.999) and epsilon 1e-8
throughout; gradients clipped at global norm 10 by default.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .augment import (
    AugmentConfig,
    apply_photometric_geometric,
    downsample_labels,
    mosaic,
    normalize,
)
from .data import Sample, load_manifest
from .evaluation import evaluate_model
from .losses import AssignedTargets, BatchTargets, LossWeights, assign_targets, total_loss
from .network import NetworkConfig, PerceptionNet, build, save_checkpoint
from .quantization import QuantConfig, prepare_qat

STAGE_NAMES = ("pretrain1", "pretrain2", "finetune", "qat")

WARMUP_FLOOR_DIV = 100.0  # warmup starts at lr_init / 100


@dataclass(frozen=True)
class StageConfig:
    name: str
    epochs: int
    batch_size: int
    lr_init: float
    lr_min: float
    warmup_epochs: int = 0
    mosaic: bool = False
    mosaic_off_tail: int = 0
    datasets: tuple[str, ...] = ()
    qat_enabled: bool = False

    def __post_init__(self):
        if self.name not in STAGE_NAMES:
            raise ValueError(f"stage name must be one of {STAGE_NAMES}")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not self.lr_min < self.lr_init:
            raise ValueError("lr_min must be below lr_init")
        if not 0 <= self.mosaic_off_tail <= self.epochs:
            raise ValueError("mosaic_off_tail must be within [0, epochs]")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must be within [0, epochs]")


@dataclass
class TrainSchedule:
    stages: tuple[StageConfig, ...]
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    quant: QuantConfig = field(default_factory=QuantConfig)
    val_manifest: str | None = None
    eval_every: int = 1
    grad_clip_norm: float = 10.0
    use_weight_ema: bool = False  # reserved; default off and unused

    def __post_init__(self):
        qat_positions = [i for i, s in enumerate(self.stages) if s.qat_enabled]
        if qat_positions and qat_positions != [len(self.stages) - 1]:
            raise ValueError("the qat stage must be the last stage")
        if self.use_weight_ema:
            raise ValueError("weight EMA is not implemented; leave use_weight_ema off")


def lr_at(step: int, stage: StageConfig, steps_per_epoch: int) -> float:
    """Learning rate at a 0-based optimizer step within the stage.

    Linear warmup from ``lr_init/100`` to ``lr_init`` over the warmup epochs,
    then cosine annealing that reaches ``lr_min`` exactly on the final step.
    """
    total = stage.epochs * steps_per_epoch
    warmup = stage.warmup_epochs * steps_per_epoch
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside stage of {total} steps")
    floor = stage.lr_init / WARMUP_FLOOR_DIV
    if step < warmup:
        return floor + (stage.lr_init - floor) * (step / warmup)
    span = max(total - 1 - warmup, 1)
    t = min((step - warmup) / span, 1.0)
    return stage.lr_min + 0.5 * (stage.lr_init - stage.lr_min) * (1.0 + math.cos(math.pi * t))


def _load_stage_samples(stage: StageConfig) -> list[Sample]:
    samples: list[Sample] = []
    for manifest in stage.datasets:
        samples.extend(r.load() for r in load_manifest(manifest))
    if not samples:
        raise ValueError(f"stage {stage.name!r} has no training samples")
    return samples


def _batch_tensors(
    samples: list[Sample], schedule: TrainSchedule
) -> tuple[torch.Tensor, BatchTargets]:
    cfg = schedule.network
    grid_shapes = cfg.grid_shapes()
    images = []
    assigned: list[AssignedTargets] = []
    drv, lane = [], []
    for s in samples:
        x = normalize(s.image, schedule.augment.normalize_mean, schedule.augment.normalize_std)
        images.append(torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))))
        assigned.append(assign_targets(s.boxes, cfg.anchor_set, grid_shapes))
        drv.append(torch.from_numpy(downsample_labels(s.drivable.class_map, 4).astype(np.int64)))
        lane.append(torch.from_numpy(downsample_labels(s.lane.class_map, 4).astype(np.int64)))
    batch = torch.stack(images)
    targets = BatchTargets(assigned=assigned, drivable=torch.stack(drv), lane=torch.stack(lane))
    return batch, targets


def _check_finite(total: torch.Tensor, breakdown: dict, where: str) -> None:
    if torch.isfinite(total):
        return
    bad = [k for k, v in breakdown.items() if not math.isfinite(v)]
    raise RuntimeError(f"non-finite loss at {where}: offending components {bad or ['total']}")


def run_stage(
    model: PerceptionNet,
    stage: StageConfig,
    schedule: TrainSchedule,
    stage_index: int = 0,
    val_samples: list[Sample] | None = None,
    train_samples: list[Sample] | None = None,
) -> tuple[PerceptionNet, list[dict]]:
    """Train one stage; returns the model and one log record per epoch.

    Mosaic is active iff the stage enables it and the epoch lies before
    ``epochs - mosaic_off_tail``. A qat stage wraps the model with fake-quant
    nodes before its first step. ``train_samples`` overrides the stage's
    manifest list (in-memory datasets for tests).
    """
    data = train_samples if train_samples is not None else _load_stage_samples(stage)
    if not data:
        raise ValueError(f"stage {stage.name!r} has no training samples")
    if stage.qat_enabled and model.input_fq is None:
        prepare_qat(model, schedule.quant)
    torch.manual_seed((schedule.seed + 1) * 10_000 + stage_index)

    n = len(data)
    steps_per_epoch = math.ceil(n / stage.batch_size)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=stage.lr_init, betas=(0.9, 0.999), eps=1e-8
    )
    log: list[dict] = []

    for epoch in range(stage.epochs):
        model.train()
        mosaic_on = stage.mosaic and epoch < stage.epochs - stage.mosaic_off_tail
        epoch_seq = np.random.SeedSequence(
            entropy=schedule.seed, spawn_key=(stage_index, epoch)
        )
        order = np.random.default_rng(epoch_seq).permutation(n)
        sums: dict[str, float] = {}
        mosaic_count = 0

        for step in range(steps_per_epoch):
            idxs = order[step * stage.batch_size : (step + 1) * stage.batch_size]
            batch_samples = []
            for local_rank, idx in enumerate(idxs):
                rng = np.random.default_rng(
                    np.random.SeedSequence(
                        entropy=schedule.seed,
                        spawn_key=(stage_index, epoch, int(idx), local_rank),
                    )
                )
                s = data[idx]
                if mosaic_on:
                    partners = [data[int(j)] for j in rng.integers(0, n, size=3)]
                    s = mosaic([s, *partners], schedule.augment, rng)
                    mosaic_count += 1
                s = apply_photometric_geometric(s, schedule.augment, rng)
                batch_samples.append(s)

            batch, targets = _batch_tensors(batch_samples, schedule)
            lr = lr_at(epoch * steps_per_epoch + step, stage, steps_per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            outputs = model(batch)
            loss, breakdown = total_loss(
                outputs, targets, schedule.network.anchor_set, schedule.loss_weights
            )
            _check_finite(loss, breakdown, f"stage={stage.name} epoch={epoch} step={step}")
            loss.backward()
            if schedule.grad_clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip_norm)
            optimizer.step()
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v

        record = {
            "stage": stage.name,
            "stage_index": stage_index,
            "epoch": epoch,
            "lr": lr_at((epoch + 1) * steps_per_epoch - 1, stage, steps_per_epoch),
            "mosaic_applied": mosaic_count,
            "loss": {k: v / steps_per_epoch for k, v in sums.items()},
        }
        if val_samples and schedule.eval_every > 0 and (epoch + 1) % schedule.eval_every == 0:
            report = evaluate_model(model, val_samples)
            record["eval"] = {
                "map50": report.map50,
                "drivable_miou": report.drivable_miou,
                "lane_miou": report.lane_miou,
                "merged_miou": report.merged_miou,
            }
        log.append(record)
    model.eval()
    return model, log


def run_schedule(
    schedule: TrainSchedule,
    out_dir: str | Path,
    start_stage: int = 0,
    model: PerceptionNet | None = None,
) -> tuple[PerceptionNet, list[dict], list[Path]]:
    """Run stages in order, checkpointing at every stage boundary.

    ``start_stage``/``model`` resume a schedule from a boundary checkpoint;
    with a fixed seed the remaining trajectory reproduces a straight-through
    run exactly. An empty schedule returns the initial model unchanged.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = build(schedule.network, schedule.seed)
    val_samples = None
    if schedule.val_manifest:
        val_samples = [r.load() for r in load_manifest(schedule.val_manifest)]

    logs: list[dict] = []
    checkpoints: list[Path] = []
    log_path = out_dir / "train_log.jsonl"
    mode = "w" if start_stage == 0 else "a"
    with open(log_path, mode) as log_file:
        for si in range(start_stage, len(schedule.stages)):
            stage = schedule.stages[si]
            model, stage_log = run_stage(model, stage, schedule, si, val_samples)
            for record in stage_log:
                log_file.write(json.dumps(record) + "\n")
            logs.extend(stage_log)
            extra = {"stage_index": si, "stage": stage.name}
            if stage.qat_enabled:
                extra.update({"qat": True, "quant": asdict(schedule.quant)})
            ckpt = save_checkpoint(model, out_dir / f"stage{si}_{stage.name}.ckpt.zip", extra)
            checkpoints.append(ckpt)
    return model, logs, checkpoints
