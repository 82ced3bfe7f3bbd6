"""Self-supervised pretraining loop with warmup + cosine schedule and checkpoints.

Every optimization step draws its batch from a generator derived from
``(seed, global_step)``, so a run resumed from a checkpoint replays exactly
the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .augment3d import AugmentConfig, derive_rng
from .losses import LossConfig, barlow_twins_loss, combined_loss, cross_correlation
from .model import (
    EncoderConfig,
    ProjectorConfig,
    SiameseModel,
    build_model,
    config_fingerprint,
    param_groups,
)
from .pairs import SamplerConfig, pairs_by_patient, sample_batch, training_steps_per_epoch
from .voldata import Cohort, VisitRecord, load_visit, preprocess

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "epoch", "lr", "similarity", "variance_a", "variance_b",
                   "covariance_a", "covariance_b", "total")
HISTORY_NAME = "loss_history.csv"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class FingerprintMismatchError(ValueError):
    """Checkpoint was produced by a different configuration."""


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 400
    warmup_epochs: int = 10
    base_lr: float = 5e-4
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("need 0 <= warmup_epochs <= epochs")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")
        if tuple(self.augment.output_shape) != tuple(self.encoder.input_shape):
            raise ValueError(f"augment.output_shape {self.augment.output_shape} must equal "
                             f"encoder.input_shape {self.encoder.input_shape}")

    def fingerprint(self) -> str:
        d = asdict(self)
        d.pop("checkpoint_every")
        return config_fingerprint(d)


def lr_at(step: int, cfg: PretrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0."""
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup and step <= warmup:
        return cfg.base_lr * step / warmup
    progress = (step - warmup) / (total - warmup)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_loader(shape) -> Callable[[VisitRecord], np.ndarray]:
    n_slices = shape[0]

    def load(visit: VisitRecord) -> np.ndarray:
        return preprocess(load_visit(visit), n_slices=n_slices)

    return load


@dataclass
class TrainState:
    model: SiameseModel
    optimizer: torch.optim.Optimizer
    global_step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def new_state(cfg: PretrainConfig) -> TrainState:
    model = build_model(cfg.encoder, cfg.projector, cfg.seed)
    opt = torch.optim.AdamW(param_groups(model, cfg.weight_decay), lr=0.0)
    return TrainState(model, opt)


def step_losses(model, xa, xb, dt, cfg: LossConfig) -> tuple[torch.Tensor, dict]:
    za, zb = model(xa), model(xb)
    if cfg.loss == "barlow_twins":
        total = barlow_twins_loss(za, zb, cfg)
        c = cross_correlation(za, zb, cfg.eps)
        on = (1 - torch.diagonal(c)).pow(2).sum()
        on, total_f = float(on.detach()), float(total.detach())
        row = {"similarity": on, "variance_a": 0.0, "variance_b": 0.0,
               "covariance_a": total_f - on, "covariance_b": 0.0}
    else:
        br = combined_loss(za, zb, dt, cfg)
        total = br.total
        row = br.as_floats()
        row.pop("total")
    row["total"] = float(total.detach())
    return total, row


def train_step(state: TrainState, cohort: Cohort, cfg: PretrainConfig, steps_per_epoch: int,
               loader, pool) -> dict:
    step = state.global_step + 1
    rng = derive_rng(cfg.seed, "batch", step)
    batch = sample_batch(cohort, cfg.sampler, cfg.augment, rng, loader=loader,
                         view_seed=int(rng.integers(2**31)), pool=pool)
    xa, xb = (torch.from_numpy(x) for x in batch.stacked())
    dt = torch.from_numpy(batch.dt_norm).float()

    state.model.train()
    loss, row = step_losses(state.model, xa, xb, dt, cfg.loss)
    if not math.isfinite(row["total"]):
        raise NonFiniteLossError(step, row["total"])
    lr = lr_at(step, cfg, steps_per_epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.global_step = step
    return {"step": step, "epoch": state.epoch + 1, "lr": lr, **row}


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_write(path: Path, write: Callable[[Path], None]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


def save_checkpoint(state: TrainState, cfg: PretrainConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = out_dir / f"ckpt_{state.epoch}.bin"
    payload = {"model": state.model.state_dict(), "optimizer": state.optimizer.state_dict(),
               "global_step": state.global_step, "epoch": state.epoch,
               "history": state.history}
    _atomic_write(blob, lambda p: torch.save(payload, p))
    meta = {"fingerprint": cfg.fingerprint(), "epoch": state.epoch,
            "global_step": state.global_step, "seed": cfg.seed, "loss_history": HISTORY_NAME,
            "config": asdict(cfg)}
    _atomic_write(blob.with_suffix(".meta"),
                  lambda p: p.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n"))
    return blob


def read_meta(checkpoint) -> dict:
    return json.loads(Path(checkpoint).with_suffix(".meta").read_text())


def load_model(checkpoint) -> SiameseModel:
    """Rebuild the network stored in a checkpoint (config taken from its sidecar)."""
    from .config import pretrain_config_from_dict

    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    cfg = pretrain_config_from_dict(read_meta(checkpoint)["config"])
    model = build_model(cfg.encoder, cfg.projector, cfg.seed)
    payload = torch.load(checkpoint, weights_only=False)
    model.load_state_dict(payload["model"])
    model.eval()
    return model


def resume(checkpoint, cfg: PretrainConfig) -> TrainState:
    checkpoint = Path(checkpoint)
    meta = read_meta(checkpoint)
    if meta["fingerprint"] != cfg.fingerprint():
        raise FingerprintMismatchError(
            f"{checkpoint} was written by config {meta['fingerprint']}, "
            f"current config is {cfg.fingerprint()}")
    state = new_state(cfg)
    payload = torch.load(checkpoint, weights_only=False)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.global_step = payload["global_step"]
    state.epoch = payload["epoch"]
    state.history = list(payload["history"])
    return state


def _write_history(path: Path, rows, mode: str) -> None:
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        if mode == "w":
            writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(row[k])) if k not in ("step", "epoch") else row[k])
                             for k in HISTORY_COLUMNS})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


@dataclass
class PretrainResult:
    checkpoint: Path
    history: list[dict]
    state: TrainState


def pretrain(cohort: Cohort, cfg: PretrainConfig, out_dir, resume_from=None,
             stop_after_epoch: Optional[int] = None) -> PretrainResult:
    """Train for ``cfg.epochs`` epochs, writing checkpoints and a per-step loss log.

    ``stop_after_epoch`` ends the run early (after checkpointing) without
    changing the schedule, which is how an interrupted run is simulated.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = resume(resume_from, cfg) if resume_from else new_state(cfg)
    spe = training_steps_per_epoch(cohort, cfg.sampler)
    pool = pairs_by_patient(cohort, cfg.sampler)
    loader = make_loader(cfg.encoder.input_shape)
    history_path = out_dir / HISTORY_NAME
    _write_history(history_path, state.history, "w")

    last_ckpt = Path(resume_from) if resume_from else None
    end = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    while state.epoch < end:
        rows = [train_step(state, cohort, cfg, spe, loader, pool) for _ in range(spe)]
        state.epoch += 1
        state.history.extend(rows)
        _write_history(history_path, rows, "a")
        log.info("epoch %d/%d  loss %.4f", state.epoch, cfg.epochs,
                 float(np.mean([r["total"] for r in rows])))
        if state.epoch % cfg.checkpoint_every == 0 or state.epoch == end:
            last_ckpt = save_checkpoint(state, cfg, out_dir)
    if last_ckpt is None:
        last_ckpt = save_checkpoint(state, cfg, out_dir)
    return PretrainResult(last_ckpt, state.history, state)


def epoch_means(history: list[dict], key: str = "total") -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for row in history:
        by_epoch.setdefault(row["epoch"], []).append(row[key])
    return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def with_method(cfg: PretrainConfig, method: str) -> PretrainConfig:
    """Switch the objective: ``tinc``, ``vicreg`` or ``barlow``."""
    modes = {"tinc": ("vicreg_family", "tinc"),
             "vicreg": ("vicreg_family", "vicreg_invariance"),
             "barlow": ("barlow_twins", cfg.loss.similarity_mode)}
    if method not in modes:
        raise ValueError(f"unknown method {method!r}")
    loss, sim = modes[method]
    return dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, loss=loss,
                                                             similarity_mode=sim))
