"""Frozen-backbone multi-scale feature aggregation.

Feature maps tapped at several depths of a frozen CNN are bilinearly resized
to one grid and concatenated along the channel axis.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ConfigError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

RANDOM_FROZEN = "random-frozen"

# Index (in torchvision's ``vgg16().features``) of the ReLU after the last conv of each block.
VGG16_BLOCK_TAPS = {1: 3, 2: 8, 3: 15, 4: 22, 5: 29}
VGG16_BLOCK_CHANNELS = {1: 64, 2: 128, 3: 256, 4: 512, 5: 512}
TOY_BLOCK_CHANNELS = (8, 16, 32)


class BackboneLoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str = "vgg16"
    layer_indices: tuple[int, ...] = (1, 2, 3)
    weights: str = RANDOM_FROZEN
    seed: int = 0
    frozen: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_indices", tuple(int(i) for i in self.layer_indices))
        if self.architecture not in ("vgg16", "toy"):
            raise ConfigError(f"unknown backbone architecture {self.architecture!r}")
        idx = self.layer_indices
        if not idx:
            raise ConfigError("layer_indices must not be empty")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError(f"layer_indices must be strictly increasing, got {idx}")
        depth = 5 if self.architecture == "vgg16" else len(TOY_BLOCK_CHANNELS)
        if idx[0] < 1 or idx[-1] > depth:
            raise ConfigError(f"{self.architecture} has blocks 1..{depth}; got taps {idx}")
        if not self.frozen:
            raise ConfigError("the backbone is always frozen")

    @property
    def channels(self) -> tuple[int, ...]:
        table = VGG16_BLOCK_CHANNELS if self.architecture == "vgg16" else dict(enumerate(TOY_BLOCK_CHANNELS, 1))
        return tuple(table[i] for i in self.layer_indices)

    def to_dict(self) -> dict:
        return asdict(self)


class ToyBackbone(nn.Module):
    """Three conv blocks (8/16/32 channels); each tap is taken before the 2x2 max-pool."""

    def __init__(self):
        super().__init__()
        blocks, c_in = [], 3
        for c in TOY_BLOCK_CHANNELS:
            blocks.append(nn.Sequential(nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU()))
            c_in = c
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, taps: Sequence[int]):
        out = []
        for i, block in enumerate(self.blocks, 1):
            if i > 1:
                x = F.max_pool2d(x, 2)
            x = block(x)
            if i in taps:
                out.append(x)
            if i >= max(taps):
                break
        return out


class VGG16Backbone(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import vgg16

        self.features = vgg16(weights=None).features

    def forward(self, x, taps: Sequence[int]):
        wanted = {VGG16_BLOCK_TAPS[t]: t for t in taps}
        last = max(wanted)
        out = []
        for idx, layer in enumerate(self.features):
            x = layer(x)
            if idx in wanted:
                out.append(x)
            if idx >= last:
                break
        return out


def _load_weights(module: nn.Module, config: BackboneConfig) -> None:
    if config.weights == RANDOM_FROZEN:
        return
    if config.weights == "imagenet":
        if config.architecture != "vgg16":
            raise ConfigError("imagenet weights are only available for vgg16")
        from torchvision.models import VGG16_Weights, vgg16

        try:
            module.features.load_state_dict(vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features.state_dict())
        except Exception as exc:  # network or cache failure
            raise BackboneLoadError(f"could not fetch imagenet weights: {exc}") from exc
        return
    path = Path(config.weights)
    if not path.is_file():
        raise BackboneLoadError(f"backbone weights file not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise BackboneLoadError(f"corrupt backbone weights file {path}: {exc}") from exc
    if config.architecture == "vgg16":
        # accept a full vgg16 state dict or one for ``.features`` alone
        feats = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
        state = {"features." + k: v for k, v in (feats or state).items()}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise BackboneLoadError(f"weights in {path} do not match {config.architecture}: {exc}") from exc


def build_backbone(config: BackboneConfig) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        module = VGG16Backbone() if config.architecture == "vgg16" else ToyBackbone()
    _load_weights(module, config)
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def aggregate(maps: Sequence[torch.Tensor], target_size: tuple[int, int]) -> torch.Tensor:
    """Resize each ``(N, C_i, h_i, w_i)`` map bilinearly to ``target_size`` and concatenate channels."""
    if len(maps) == 0:
        raise ValueError("aggregate needs at least one feature map")
    th, tw = (int(s) for s in target_size)
    if th <= 0 or tw <= 0:
        raise ValueError(f"target size must be positive, got {target_size}")
    resized = []
    for m in maps:
        if m.ndim == 3:
            m = m.unsqueeze(0)
        if tuple(m.shape[-2:]) != (th, tw):
            m = F.interpolate(m, size=(th, tw), mode="bilinear", align_corners=False)
        resized.append(m)
    return torch.cat(resized, dim=1)


class MultiScaleFeatureExtractor(nn.Module):
    """Frozen backbone plus resize-and-concatenate aggregation."""

    def __init__(self, config: BackboneConfig = BackboneConfig(), feature_size: tuple[int, int] = (64, 64)):
        super().__init__()
        self.config = config
        self.feature_size = tuple(feature_size)
        self.backbone = build_backbone(config)
        if config.architecture == "vgg16" and config.weights != RANDOM_FROZEN:
            mean, std = IMAGENET_MEAN, IMAGENET_STD
        else:
            mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    @property
    def out_channels(self) -> int:
        return sum(self.config.channels)

    def train(self, mode: bool = True):
        # the backbone never leaves eval mode
        super().train(mode)
        self.backbone.eval()
        return self

    @torch.no_grad()
    def extract(self, images: torch.Tensor) -> list[torch.Tensor]:
        """One feature map per tap, in layer order. ``images`` are ``(N, 3, H, W)`` in [0, 1]."""
        if images.ndim == 3:
            images = images.unsqueeze(0)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        x = (images.to(self.mean) - self.mean) / self.std
        return self.backbone(x, self.config.layer_indices)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return aggregate(self.extract(images), self.feature_size)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.backbone.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def extract_features(images: torch.Tensor, backbone: BackboneConfig | MultiScaleFeatureExtractor) -> list[torch.Tensor]:
    """Per-tap feature maps for ``images`` from a frozen backbone."""
    if isinstance(backbone, BackboneConfig):
        backbone = MultiScaleFeatureExtractor(backbone)
    return backbone.extract(images)
