"""Input validation helpers shared across the package."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch


class ConfigError(ValueError):
    """Raised when a configuration value is inconsistent or out of range."""


def as_feature_batch(x, name: str = "features") -> torch.Tensor:
    """Return ``x`` as a 4D ``(N, C, H, W)`` float tensor.

    Accepts a single ``(C, H, W)`` map, a batch, or anything ``torch.as_tensor``
    understands. Raises ``ValueError`` for other ranks or non-finite entries.
    """
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise ValueError(f"{name} must have shape (C, H, W) or (N, C, H, W), got {tuple(t.shape)}")
    if min(t.shape[1:]) <= 0:
        raise ValueError(f"{name} has an empty dimension: {tuple(t.shape)}")
    return t


def check_same_shape(a: torch.Tensor, b: torch.Tensor, names=("target", "recon")) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} and {names[1]} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_k_set(k_set: Iterable[int], feature_size: Sequence[int]) -> tuple[int, ...]:
    """Validate masking cell sizes against the feature grid."""
    ks = tuple(int(k) for k in k_set)
    if not ks:
        raise ConfigError("k_set must not be empty")
    h, w = feature_size
    for k in ks:
        if k < 1 or h % k or w % k:
            raise ConfigError(f"masking size k={k} does not divide the feature size {h}x{w}")
    return ks


def check_binary(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return a.astype(np.uint8)
