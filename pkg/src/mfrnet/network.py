"""Restoration network: head conv, five-stage hybrid transformer U-body, tail conv.

Hybrid transformer block (pre-norm):

    x = x + LPA(x)
    x = x + MPSA(LN(x))
    x = x + CFFN(LN(x))

MPSA draws keys and values from average-pooled copies of its input at several
ratios, which keeps attention cost well below full self-attention.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ConfigError

CHECKPOINT_MAGIC = "MFRNET-CKPT-1"


@dataclass(frozen=True)
class RestorationNetConfig:
    in_channels: int
    base_channels: int = 64
    pooling_ratios: tuple[int, ...] = (2, 3, 4, 5)
    stage_blocks: tuple[int, ...] = (1, 2, 4, 2, 1)
    stage_multipliers: tuple[int, ...] = (1, 2, 4, 2, 1)
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "pooling_ratios", tuple(int(r) for r in self.pooling_ratios))
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_multipliers", tuple(int(m) for m in self.stage_multipliers))
        if self.in_channels <= 0 or self.base_channels <= 0:
            raise ConfigError("in_channels and base_channels must be positive")
        if not self.pooling_ratios or min(self.pooling_ratios) < 1:
            raise ConfigError("pooling_ratios must be non-empty and all >= 1")
        if len(self.stage_blocks) != 5 or len(self.stage_multipliers) != 5:
            raise ConfigError("exactly 5 stages are required")
        if min(self.stage_blocks) < 0:
            raise ConfigError("stage block counts must be >= 0")
        m = self.stage_multipliers
        if not (m[1] == 2 * m[0] and m[2] == 2 * m[1] and m[3] == m[1] and m[4] == m[0]):
            raise ConfigError("stage multipliers must double over stages 1-3 and mirror back, e.g. (1, 2, 4, 2, 1)")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.stage_multipliers)

    def to_dict(self) -> dict:
        return asdict(self)


def _layer_norm_2d(norm: nn.LayerNorm, x: torch.Tensor) -> torch.Tensor:
    return norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class LPA(nn.Module):
    """Locally position-aware module: a 3x3 zero-padded convolution."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x):
        return self.conv(x)


class MPSA(nn.Module):
    """Single-head attention with keys/values from multi-ratio average pooling."""

    def __init__(self, dim: int, pooling_ratios=(2, 3, 4, 5)):
        super().__init__()
        self.dim = dim
        self.pooling_ratios = tuple(pooling_ratios)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)

    def pooled_tokens(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenate pooled copies of ``x`` along the token axis: ``(B, M, D)``."""
        h, w = x.shape[-2:]
        for r in self.pooling_ratios:
            if r > min(h, w):
                raise ConfigError(f"pooling ratio {r} exceeds the {h}x{w} token grid")
        pooled = [x if r == 1 else F.avg_pool2d(x, r, stride=r) for r in self.pooling_ratios]
        return torch.cat([p.flatten(2) for p in pooled], dim=2).transpose(1, 2)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        b, c, h, w = x.shape
        z = x.flatten(2).transpose(1, 2)
        zp = self.pooled_tokens(x)
        q = self.q(z)
        k = self.k(zp)
        v = self.v(zp)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(k.shape[-1]), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return (out, attn) if return_attention else out


class CFFN(nn.Module):
    """1x1 expand -> GELU -> 3x3 depthwise -> GELU -> 1x1 project."""

    def __init__(self, dim: int, mlp_ratio: int = 4):
        super().__init__()
        hidden = dim * mlp_ratio
        self.hidden = hidden
        self.fc1 = nn.Conv2d(dim, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.dw(F.gelu(self.fc1(x)))))


class HybridTransformerBlock(nn.Module):
    def __init__(self, dim: int, pooling_ratios=(2, 3, 4, 5), mlp_ratio: int = 4):
        super().__init__()
        self.lpa = LPA(dim)
        self.norm1 = nn.LayerNorm(dim, eps=1e-5)
        self.attn = MPSA(dim, pooling_ratios)
        self.norm2 = nn.LayerNorm(dim, eps=1e-5)
        self.ffn = CFFN(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.lpa(x)
        x = x + self.attn(_layer_norm_2d(self.norm1, x))
        x = x + self.ffn(_layer_norm_2d(self.norm2, x))
        return x


def _stage(dim, n_blocks, config):
    return nn.Sequential(*[HybridTransformerBlock(dim, config.pooling_ratios, config.mlp_ratio)
                           for _ in range(n_blocks)])


class RestorationNet(nn.Module):
    """Encoder-decoder that inpaints masked feature maps.

    Stages 1-2 end with a stride-2 conv (half size, double width), stages 4-5
    start with a stride-2 transposed conv. Skips are additive: stage-2 output
    joins the stage-4 input and stage-1 output joins the stage-5 input.
    """

    def __init__(self, config: RestorationNetConfig):
        super().__init__()
        self.config = config
        c1, c2, c3, c4, c5 = config.stage_channels
        self.head = nn.Conv2d(config.in_channels, c1, 3, padding=1)
        self.stage1 = _stage(c1, config.stage_blocks[0], config)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.stage2 = _stage(c2, config.stage_blocks[1], config)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.stage3 = _stage(c3, config.stage_blocks[2], config)
        self.up1 = nn.ConvTranspose2d(c3, c4, 2, stride=2)
        self.stage4 = _stage(c4, config.stage_blocks[3], config)
        self.up2 = nn.ConvTranspose2d(c4, c5, 2, stride=2)
        self.stage5 = _stage(c5, config.stage_blocks[4], config)
        self.tail = nn.Conv2d(c5, config.in_channels, 3, padding=1)
        self.apply(_init_weights)

    def encode(self, x):
        """Return the stage-1, stage-2 and stage-3 outputs."""
        s1 = self.down1(self.stage1(self.head(x)))
        s2 = self.down2(self.stage2(s1))
        s3 = self.stage3(s2)
        return s1, s2, s3

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (N, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 4")
        s1, s2, s3 = self.encode(x)
        s4 = self.stage4(self.up1(s3 + s2))
        s5 = self.stage5(self.up2(s4 + s1))
        return self.tail(s5)


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def build_network(config: RestorationNetConfig, seed: int = 0) -> RestorationNet:
    """Construct a network whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RestorationNet(config)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def block_parameter_count(dim: int, mlp_ratio: int = 4) -> int:
    """Closed-form parameter count of one hybrid transformer block of width ``dim``."""
    hidden = mlp_ratio * dim
    lpa = dim * dim * 9 + dim
    norms = 2 * 2 * dim
    attn = 3 * (dim * dim + dim)
    ffn = (dim * hidden + hidden) + (hidden * 9 + hidden) + (hidden * dim + dim)
    return lpa + norms + attn + ffn


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(path, net: RestorationNet, step: int = 0, extra: dict | None = None) -> None:
    """Write network weights, config and step counter atomically."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "net_config": net.config.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
        "step": int(step),
        "extra": extra or {},
    }
    _atomic_save(payload, Path(path))


def load_checkpoint(path) -> tuple[RestorationNet, dict]:
    """Return the restored network and the raw payload (``step``, ``extra``...)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint")
    net = RestorationNet(RestorationNetConfig(**payload["net_config"]))
    net.load_state_dict(payload["state_dict"])
    return net, payload
