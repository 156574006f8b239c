"""Hybrid restoration objective: contextual L2, SSIM and gradient-magnitude similarity.

All functions take ``(N, C, H, W)`` tensors (a single ``(C, H, W)`` map is
promoted to a batch of one). Similarity maps are computed per channel and
averaged over channels, so a map has shape ``(N, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from ._validation import ConfigError, as_feature_batch, check_same_shape

# 3x3 Prewitt kernels, normalised by 3 so a unit step yields unit gradient.
PREWITT_X = torch.tensor([[1.0, 0.0, -1.0], [1.0, 0.0, -1.0], [1.0, 0.0, -1.0]], dtype=torch.float64) / 3.0
PREWITT_Y = PREWITT_X.t().contiguous()

GRAD_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    ssim_window: int = 11
    ssim_a1: float = 1e-4
    ssim_a2: float = 1e-4
    gms_b: float = 1e-4

    def __post_init__(self):
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        for name in ("ssim_a1", "ssim_a2", "gms_b"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")


class HybridLoss(NamedTuple):
    total: torch.Tensor
    contextual: torch.Tensor
    ssim: torch.Tensor
    gms: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "L_Con": float(self.contextual.detach()),
            "L_SSIM": float(self.ssim.detach()),
            "L_GMS": float(self.gms.detach()),
            "total": float(self.total.detach()),
        }


def _pair(target, recon):
    target = as_feature_batch(target, "target")
    recon = as_feature_batch(recon, "recon")
    check_same_shape(target, recon)
    return target, recon


def contextual_loss(target, recon) -> torch.Tensor:
    """Squared L2 distance summed over channels, divided by ``H * W``; batch-averaged."""
    target, recon = _pair(target, recon)
    h, w = target.shape[-2:]
    per_item = (target - recon).pow(2).flatten(1).sum(dim=1) / (h * w)
    return per_item.mean()


def ssim_formula(mu_x, mu_y, var_x, var_y, cov_xy, a1, a2):
    """Structural similarity from local statistics."""
    num = (2 * mu_x * mu_y + a1) * (2 * cov_xy + a2)
    den = (mu_x * mu_x + mu_y * mu_y + a1) * (var_x + var_y + a2)
    return num / den


def _local_mean(x: torch.Tensor, window: int) -> torch.Tensor:
    pad = window // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    return F.avg_pool2d(x, window, stride=1)


def ssim_map(x, y, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-pixel SSIM over a uniform window with edge-replicated borders.

    Returns an ``(N, H, W)`` map, channel-averaged.
    """
    x, y = _pair(x, y)
    window = config.ssim_window
    if min(x.shape[-2:]) < window:
        raise ValueError(f"spatial size {tuple(x.shape[-2:])} is smaller than the SSIM window {window}")
    mu_x = _local_mean(x, window)
    mu_y = _local_mean(y, window)
    var_x = _local_mean(x * x, window) - mu_x * mu_x
    var_y = _local_mean(y * y, window) - mu_y * mu_y
    cov = _local_mean(x * y, window) - mu_x * mu_y
    s = ssim_formula(mu_x, mu_y, var_x, var_y, cov, config.ssim_a1, config.ssim_a2)
    return s.mean(dim=1)


def ssim_loss(x, y, config: LossConfig = LossConfig()) -> torch.Tensor:
    return (1 - ssim_map(x, y, config)).mean()


def gradient_magnitude(x: torch.Tensor) -> torch.Tensor:
    """Prewitt gradient magnitude per channel, zero-padded borders."""
    c = x.shape[1]
    kx = PREWITT_X.to(x).expand(c, 1, 3, 3)
    ky = PREWITT_Y.to(x).expand(c, 1, 3, 3)
    gx = F.conv2d(x, kx, padding=1, groups=c)
    gy = F.conv2d(x, ky, padding=1, groups=c)
    return torch.sqrt(gx * gx + gy * gy + GRAD_EPS)


def gms_map(x, y, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Gradient magnitude similarity, channel-averaged ``(N, H, W)`` map."""
    x, y = _pair(x, y)
    gx = gradient_magnitude(x)
    gy = gradient_magnitude(y)
    b = config.gms_b
    g = (2 * gx * gy + b) / (gx * gx + gy * gy + b)
    return g.mean(dim=1)


def gms_loss(x, y, config: LossConfig = LossConfig()) -> torch.Tensor:
    return (1 - gms_map(x, y, config)).mean()


def hybrid_loss(target, recon, config: LossConfig = LossConfig()) -> HybridLoss:
    """Sum of the contextual, SSIM and GMS losses, with the parts kept for logging."""
    target, recon = _pair(target, recon)
    con = contextual_loss(target, recon)
    ss = ssim_loss(target, recon, config)
    gm = gms_loss(target, recon, config)
    return HybridLoss(con + ss + gm, con, ss, gm)
