"""Shared feature extractor with two growing classifier heads.

The extractor is a small conv net (GroupNorm, so forward passes carry no
running statistics and are pure functions of the parameters). Both heads
always cover every class seen so far; growing them preserves the old weight
block bit-for-bit. Snapshots are frozen deep copies of the whole model.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

PRIMARY = "primary"
AUXILIARY = "auxiliary"

LWF_KINDS = ("kd", "ft")
ROBUST_LWF_KINDS = ("kd", "ft", "rkd", "rft")

CHECKPOINT_VERSION = 1


class ModelStateError(RuntimeError):
    """Lifecycle misuse: growing mid-session, mutating a snapshot, ..."""


@dataclass
class Hyperparameters:
    """Loss weights and regularizer choices for one experiment.

    lwf_weight scales the learning-without-forgetting terms in standard
    training; robust_lwf_weight and consistency_weight are their analogues
    under adversarial training.
    """

    lwf_weight: float = 0.5
    robust_lwf_weight: float = 0.05
    consistency_weight: float = 0.2
    kd_temperature: float = 2.0
    lwf_kind: str = "kd"
    robust_lwf_kind: str = "rkd"
    use_consistency: bool = False

    def __post_init__(self):
        if self.lwf_weight < 0 or self.robust_lwf_weight < 0 or self.consistency_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be positive")
        if self.lwf_kind not in LWF_KINDS:
            raise ValueError(f"lwf_kind must be one of {LWF_KINDS}, got {self.lwf_kind!r}")
        if self.robust_lwf_kind not in ROBUST_LWF_KINDS:
            raise ValueError(
                f"robust_lwf_kind must be one of {ROBUST_LWF_KINDS}, got {self.robust_lwf_kind!r}"
            )


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    image_size: int = 16
    conv_channels: tuple[int, ...] = (16, 32)
    feature_dim: int = 64
    norm_groups: int = 4

    def __post_init__(self):
        if len(self.conv_channels) < 1:
            raise ValueError("need at least one conv block")
        if self.image_size % (2 ** len(self.conv_channels)) != 0:
            raise ValueError("image_size must be divisible by 2**num_blocks")


class ConvFeatureExtractor(nn.Module):
    """Conv blocks (conv3x3 -> GroupNorm -> ReLU -> MaxPool) into a linear map."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        prev = cfg.in_channels
        for ch in cfg.conv_channels:
            layers += [
                nn.Conv2d(prev, ch, kernel_size=3, padding=1),
                nn.GroupNorm(min(cfg.norm_groups, ch), ch),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            prev = ch
        self.blocks = nn.Sequential(*layers)
        side = cfg.image_size // (2 ** len(cfg.conv_channels))
        self.project = nn.Linear(prev * side * side, cfg.feature_dim)

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(x)
        return torch.relu(self.project(h.flatten(1)))


def _fresh_linear(d: int, classes: int, generator: torch.Generator) -> nn.Linear:
    """New head rows: small-uniform weights, zero bias."""
    head = nn.Linear(d, classes)
    bound = 1.0 / math.sqrt(d)
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=generator)
        head.bias.zero_()
    return head


def _grow_linear(head: nn.Linear, new_classes: int, generator: torch.Generator) -> nn.Linear:
    """Return a wider copy: old rows bit-identical, new rows initialized as
    in _fresh_linear."""
    d = head.in_features
    grown = _fresh_linear(d, head.out_features + new_classes, generator)
    with torch.no_grad():
        grown.weight[:head.out_features].copy_(head.weight)
        grown.bias[:head.out_features].copy_(head.bias)
    return grown


class DualHeadModel(nn.Module):
    """Feature extractor plus primary (class-balanced) and auxiliary
    (random-sample) classifier heads over all seen classes."""

    def __init__(self, backbone_cfg: BackboneConfig, initial_classes: int = 0):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.extractor = ConvFeatureExtractor(backbone_cfg)
        d = backbone_cfg.feature_dim
        self.primary = nn.Linear(d, initial_classes) if initial_classes else None
        self.auxiliary = nn.Linear(d, initial_classes) if initial_classes else None
        self._session_active = False
        self._frozen_snapshot = False

    @property
    def seen_classes(self) -> int:
        return 0 if self.primary is None else self.primary.out_features

    @property
    def feature_dim(self) -> int:
        return self.extractor.feature_dim

    def begin_session(self):
        if self._session_active:
            raise ModelStateError("session already active")
        self._session_active = True

    def end_session(self):
        self._session_active = False

    def features(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4:
            raise ValueError(f"expected NCHW batch, got shape {tuple(images.shape)}")
        expected = (self.backbone_cfg.in_channels,
                    self.backbone_cfg.image_size, self.backbone_cfg.image_size)
        if tuple(images.shape[1:]) != expected:
            raise ValueError(f"image shape {tuple(images.shape[1:])} != configured {expected}")
        return self.extractor(images)

    def head_logits(self, feats: torch.Tensor, which: str = PRIMARY) -> torch.Tensor:
        if which == PRIMARY:
            head = self.primary
        elif which == AUXILIARY:
            head = self.auxiliary
        else:
            raise ValueError(f"head must be {PRIMARY!r} or {AUXILIARY!r}, got {which!r}")
        if head is None:
            raise ModelStateError("model has no classes yet; call grow_heads first")
        return head(feats)

    def forward(self, images: torch.Tensor, which: str = PRIMARY) -> torch.Tensor:
        return self.head_logits(self.features(images), which)

    def grow_heads(self, new_classes: int, seed: int = 0) -> None:
        """Widen both heads in place; pre-existing parameters are preserved
        bit-for-bit. Must not be called while a session is running."""
        if new_classes < 1:
            raise ValueError(f"new_classes must be >= 1, got {new_classes}")
        if self._session_active:
            raise ModelStateError("cannot grow heads mid-session")
        if self._frozen_snapshot:
            raise ModelStateError("snapshots are immutable")
        gen = torch.Generator().manual_seed(seed)
        d = self.feature_dim
        if self.primary is None:
            self.primary = _fresh_linear(d, new_classes, gen)
            self.auxiliary = _fresh_linear(d, new_classes, gen)
        else:
            self.primary = _grow_linear(self.primary, new_classes, gen)
            self.auxiliary = _grow_linear(self.auxiliary, new_classes, gen)


def take_snapshot(model: DualHeadModel) -> DualHeadModel:
    """Frozen deep copy: eval mode, no gradients, growth refused."""
    snap = copy.deepcopy(model)
    snap.eval()
    for p in snap.parameters():
        p.requires_grad_(False)
    snap._session_active = False
    snap._frozen_snapshot = True
    return snap


def prediction_vector(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over seen classes; entries >= 0 and rows sum to 1."""
    return torch.softmax(logits, dim=-1)


# ---------------------------------------------------------------------------
# checkpoint (de)serialization
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, model: DualHeadModel, hparams: Hyperparameters,
                    seeds: dict | None = None, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "backbone": asdict(model.backbone_cfg),
        "seen_classes": model.seen_classes,
        "state_dict": model.state_dict(),
        "hyperparameters": asdict(hparams),
        "seeds": dict(seeds or {}),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[DualHeadModel, Hyperparameters, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    backbone = payload["backbone"]
    backbone["conv_channels"] = tuple(backbone["conv_channels"])
    model = DualHeadModel(BackboneConfig(**backbone),
                          initial_classes=payload["seen_classes"])
    model.load_state_dict(payload["state_dict"])
    hparams = Hyperparameters(**payload["hyperparameters"])
    return model, hparams, payload["seeds"]
