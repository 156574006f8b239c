"""Anomaly maps from crossed-mask restoration under several masking sizes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from ._validation import as_feature_batch, check_k_set, check_same_shape
from .losses import LossConfig, gms_map, ssim_map
from .masks import compose_restoration, generate_masks, masked_inputs


@dataclass
class AnomalyMap:
    scores: np.ndarray  # (H_img, W_img)
    raw_scores: np.ndarray  # (H_feat, W_feat)
    image_score: float
    k_values_used: tuple[int, ...]
    seed: int = 0
    per_k: dict = field(default_factory=dict, repr=False)


def score_for_k(features, recon, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-pixel ``(N, H, W)`` discrepancy: squared error + (1 - SSIM) + (1 - GMS).

    The squared error is averaged over channels. Both inputs are expected to be
    channel-standardised already.
    """
    features = as_feature_batch(features, "features")
    recon = as_feature_batch(recon, "recon")
    check_same_shape(features, recon, ("features", "recon"))
    l2 = (features - recon).pow(2).mean(dim=1)
    return l2 + (1 - ssim_map(features, recon, config)) + (1 - gms_map(features, recon, config))


def mask_seed_for(seed: int, k: int) -> int:
    return int(seed) * 1009 + int(k)


@torch.no_grad()
def restore_for_k(net, features: torch.Tensor, k: int, subset_count: int, seed: int) -> torch.Tensor:
    """Compose the restoration of ``features`` from ``subset_count`` masked forwards."""
    mask_set = generate_masks(features.shape[-2], features.shape[-1], k, subset_count, mask_seed_for(seed, k))
    partials = [net(x) for x in masked_inputs(features, mask_set)]
    return compose_restoration(partials, mask_set)


@torch.no_grad()
def detect_features(features: torch.Tensor, net, masking_sizes=(2, 4, 8, 16), subset_count: int = 3,
                    seed: int = 0, image_size=None, smoothing_sigma: float | None = 4.0,
                    loss_config: LossConfig = LossConfig()) -> list[AnomalyMap]:
    """Anomaly maps for a batch of normalised feature maps.

    The per-k score maps are averaged, upsampled bilinearly to ``image_size``
    and optionally Gaussian-smoothed. The image score is the map maximum.
    """
    features = as_feature_batch(features)
    ks = check_k_set(masking_sizes, features.shape[-2:])
    net.eval()
    per_k = {}
    for k in ks:
        recon = restore_for_k(net, features, k, subset_count, seed)
        per_k[k] = score_for_k(features, recon, loss_config)
    raw = torch.stack([per_k[k] for k in ks]).mean(dim=0)
    size = tuple(image_size) if image_size is not None else tuple(raw.shape[-2:])
    up = F.interpolate(raw.unsqueeze(1), size=size, mode="bilinear", align_corners=False)[:, 0]

    maps = []
    for i in range(raw.shape[0]):
        scores = up[i].double().cpu().numpy()
        if smoothing_sigma:
            scores = gaussian_filter(scores, sigma=smoothing_sigma, mode="reflect")
        scores = np.clip(scores, 0.0, None)
        maps.append(AnomalyMap(
            scores=scores,
            raw_scores=raw[i].double().cpu().numpy(),
            image_score=float(scores.max()),
            k_values_used=ks,
            seed=int(seed),
            per_k={k: v[i].double().cpu().numpy() for k, v in per_k.items()},
        ))
    return maps


def detect(images, model, masking_sizes=None, subset_count=None, seed=None) -> list[AnomalyMap]:
    """Anomaly maps for raw images using a fitted :class:`~mfrnet.MFRNet`."""
    return model.detect(images, masking_sizes=masking_sizes, subset_count=subset_count, seed=seed)


def write_heatmap(amap: AnomalyMap, path, record: dict | None = None) -> dict:
    """Save a min-max scaled 16-bit PNG plus a sidecar JSON holding the scale."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lo, hi = float(amap.scores.min()), float(amap.scores.max())
    scale = (hi - lo) / 65535.0 if hi > lo else 0.0
    img = np.zeros_like(amap.scores, dtype=np.uint16) if scale == 0 else \
        np.round((amap.scores - lo) / (hi - lo) * 65535.0).astype(np.uint16)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(img).save(tmp, format="PNG")
    tmp.replace(path)
    sidecar = {"min": lo, "max": hi, "scale": scale, "image_score": amap.image_score,
               "k_values": list(amap.k_values_used), "seed": amap.seed, **(record or {})}
    side = path.with_suffix(".json")
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(json.dumps(sidecar, indent=2))
    tmp.replace(side)
    return sidecar


def read_heatmap(path) -> np.ndarray:
    """Invert :func:`write_heatmap` back to score units."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    arr = np.asarray(Image.open(path)).astype(np.float64)
    return meta["min"] + arr * meta["scale"]
