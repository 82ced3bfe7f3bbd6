"""Channel-separated 3D encoder and MLP projector.

The encoder follows the channel-separated pattern: every block mixes channels
with a pointwise 1x1x1 convolution and does all spatial filtering with a
depthwise 3x3x3 convolution (one group per channel). The projector is only used
inside the pretraining loss; downstream code consumes :func:`encode` output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

DEPTHWISE_KERNEL = 3
STEM_KERNEL = (3, 7, 7)


class ModelConfigError(ValueError):
    """Raised when encoder/projector configs are inconsistent."""


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple[int, int, int] = (16, 64, 64)
    stem_channels: int = 16
    stem_stride: tuple[int, int, int] = (2, 4, 4)
    stage_channels: tuple[int, ...] = (16, 32)
    blocks_per_stage: tuple[int, ...] = (1, 1)
    representation_dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stem_stride", tuple(int(v) for v in self.stem_stride))
        object.__setattr__(self, "stage_channels", tuple(int(v) for v in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(v) for v in self.blocks_per_stage))
        if len(self.input_shape) != 3:
            raise ModelConfigError(f"input_shape must be (S, H, W), got {self.input_shape}")
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ModelConfigError("stage_channels and blocks_per_stage must have equal length")
        if not self.stage_channels:
            raise ModelConfigError("at least one stage is required")
        if len(self.stem_stride) != 3:
            raise ModelConfigError(f"stem_stride must have three entries, got {self.stem_stride}")
        dims = (*self.input_shape, *self.stem_stride, self.stem_channels, *self.stage_channels,
                *self.blocks_per_stage, self.representation_dim)
        if any(v <= 0 for v in dims):
            raise ModelConfigError(f"all encoder dimensions must be positive: {self}")


@dataclass(frozen=True)
class ProjectorConfig:
    # A narrow output keeps the summed invariance term from swamping the
    # per-dimension variance hinge; wide outputs collapse on small cohorts.
    hidden_dims: tuple[int, ...] = (256, 256)
    output_dim: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(v) for v in self.hidden_dims))
        if self.output_dim <= 0 or any(v <= 0 for v in self.hidden_dims):
            raise ModelConfigError(f"projector dimensions must be positive: {self}")


def _conv_out(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def feature_shapes(cfg: EncoderConfig) -> list[tuple[int, int, int]]:
    """Spatial shape after the stem and after each stage.

    Raises ModelConfigError if any axis collapses below one voxel.
    """
    shape = tuple(_conv_out(n, k, st, k // 2)
                  for n, k, st in zip(cfg.input_shape, STEM_KERNEL, cfg.stem_stride))
    shapes = [shape]
    for i in range(len(cfg.stage_channels)):
        if i > 0:
            shape = tuple(_conv_out(n, DEPTHWISE_KERNEL, 2, 1) for n in shape)
        shapes.append(shape)
    if any(n < 1 for sh in shapes for n in sh):
        raise ModelConfigError(f"input_shape {cfg.input_shape} too small for "
                               f"{len(cfg.stage_channels)} stages: {shapes}")
    return shapes


class ChannelSeparatedBlock(nn.Module):
    """Pointwise conv -> BN -> ReLU -> depthwise 3x3x3 conv -> BN, plus residual."""

    def __init__(self, in_channels: int, channels: int, stride: int = 1):
        super().__init__()
        self.pointwise = nn.Conv3d(in_channels, channels, kernel_size=1, bias=False)
        self.bn1 = nn.BatchNorm3d(channels)
        self.depthwise = nn.Conv3d(channels, channels, kernel_size=DEPTHWISE_KERNEL,
                                   stride=stride, padding=DEPTHWISE_KERNEL // 2,
                                   groups=channels, bias=False)
        self.bn2 = nn.BatchNorm3d(channels)
        self.relu = nn.ReLU()
        if stride != 1 or in_channels != channels:
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_channels, channels, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm3d(channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.pointwise(x)))
        out = self.bn2(self.depthwise(out))
        return self.relu(out + self.shortcut(x))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        feature_shapes(cfg)
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv3d(1, cfg.stem_channels, kernel_size=STEM_KERNEL, stride=cfg.stem_stride,
                      padding=tuple(k // 2 for k in STEM_KERNEL), bias=False),
            nn.BatchNorm3d(cfg.stem_channels),
            nn.ReLU(),
        )
        stages = []
        in_c = cfg.stem_channels
        for i, (c, n_blocks) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            blocks = []
            for b in range(n_blocks):
                stride = 2 if (i > 0 and b == 0) else 1
                blocks.append(ChannelSeparatedBlock(in_c, c, stride))
                in_c = c
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Sequential(
            nn.Conv3d(in_c, cfg.representation_dim, kernel_size=1, bias=False),
            nn.BatchNorm3d(cfg.representation_dim),
            nn.ReLU(),
        )
        self.pool = nn.AdaptiveAvgPool3d(1)

    def forward(self, x):
        if x.dim() == 4:
            x = x.unsqueeze(1)
        if tuple(x.shape[1:]) != (1, *self.cfg.input_shape):
            raise ValueError(f"expected volumes of shape {self.cfg.input_shape}, "
                             f"got {tuple(x.shape[1:])}")
        x = self.head(self.stages(self.stem(x)))
        return self.pool(x).flatten(1)


class Projector(nn.Module):
    """MLP with BN+ReLU on hidden layers and a plain linear output (no l2 norm)."""

    def __init__(self, in_dim: int, cfg: ProjectorConfig):
        super().__init__()
        layers = []
        d = in_dim
        for h in cfg.hidden_dims:
            layers += [nn.Linear(d, h), nn.BatchNorm1d(h), nn.ReLU()]
            d = h
        layers.append(nn.Linear(d, cfg.output_dim))
        self.net = nn.Sequential(*layers)
        self.in_dim = in_dim

    def forward(self, r):
        if r.dim() != 2 or r.shape[1] != self.in_dim:
            raise ValueError(f"expected representations (n, {self.in_dim}), got {tuple(r.shape)}")
        return self.net(r)


class SiameseModel(nn.Module):
    """Encoder f and projector g, shared by both branches."""

    def __init__(self, enc_cfg: EncoderConfig, proj_cfg: ProjectorConfig):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.proj_cfg = proj_cfg
        self.encoder = Encoder(enc_cfg)
        self.projector = Projector(enc_cfg.representation_dim, proj_cfg)

    def forward(self, x):
        return self.projector(self.encoder(x))

    @property
    def fingerprint(self) -> str:
        return config_fingerprint({"encoder": asdict(self.enc_cfg),
                                   "projector": asdict(self.proj_cfg)})


def config_fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_model(enc_cfg: EncoderConfig, proj_cfg: ProjectorConfig, seed: int = 0) -> SiameseModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SiameseModel(enc_cfg, proj_cfg)
    return model


def _as_tensor(volumes, like: nn.Module) -> torch.Tensor:
    ref = next(like.parameters())
    if isinstance(volumes, torch.Tensor):
        return volumes.to(dtype=ref.dtype)
    return torch.as_tensor(np.asarray(volumes), dtype=ref.dtype)


def encode(model: SiameseModel, volumes, train: bool = False) -> torch.Tensor:
    """Representations f(x) for a batch of volumes shaped (n, S, H, W).

    In inference mode (``train=False``) batch-norm uses running statistics and
    no graph is recorded, so each row depends only on its own input.
    """
    x = _as_tensor(volumes, model)
    model.encoder.train(train)
    if train:
        return model.encoder(x)
    with torch.no_grad():
        return model.encoder(x)


def project(model: SiameseModel, reps: torch.Tensor, train: bool = False) -> torch.Tensor:
    model.projector.train(train)
    if train:
        return model.projector(reps)
    with torch.no_grad():
        return model.projector(reps)


def param_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    """Split parameters into decayed weights and decay-exempt biases/norm params."""
    decay, exempt = [], []
    for module in model.modules():
        for name, p in module.named_parameters(recurse=False):
            if not p.requires_grad:
                continue
            is_norm = isinstance(module, (nn.BatchNorm1d, nn.BatchNorm3d))
            if is_norm or name == "bias":
                exempt.append(p)
            else:
                decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": exempt, "weight_decay": 0.0}]
