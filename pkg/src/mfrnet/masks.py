"""Crossed masks: n complementary random sub-masks over a k x k cell grid.

Polarity: a mask is 1 on visible pixels and 0 on the pixels its subset hides.
Every cell is hidden by exactly one of the n masks, so the hidden regions tile
the whole grid and each pixel is restored by exactly one partial restoration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ._validation import as_feature_batch, check_positive_int


@dataclass(frozen=True)
class MaskSet:
    masks: np.ndarray  # (n, H, W) uint8, 1 = visible
    cell_size: int
    subset_count: int
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1:]

    @property
    def assignment(self) -> np.ndarray:
        """``(H, W)`` index of the subset that hides each pixel."""
        return np.argmin(self.masks, axis=0)

    def hidden(self, i: int) -> np.ndarray:
        return 1 - self.masks[i]

    def tensor(self, i: int, like: torch.Tensor | None = None) -> torch.Tensor:
        t = torch.from_numpy(self.masks[i])
        return t.to(like) if like is not None else t.float()

    def __len__(self):
        return self.subset_count


def generate_masks(height: int, width: int, cell_size: int, subset_count: int, seed: int) -> MaskSet:
    """Randomly deal the ``(H/k) x (W/k)`` cells into ``n`` balanced subsets.

    Cells are shuffled with a generator seeded by ``seed`` and dealt round-robin,
    so per-subset cell counts differ by at most one.
    """
    height = check_positive_int(height, "height")
    width = check_positive_int(width, "width")
    k = check_positive_int(cell_size, "cell_size")
    n = check_positive_int(subset_count, "subset_count")
    if height % k or width % k:
        raise ValueError(f"{height}x{width} grid is not divisible by cell size {k}")
    gh, gw = height // k, width // k
    cells = gh * gw
    if n > cells:
        raise ValueError(f"subset_count {n} exceeds the number of cells {cells}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(cells)
    owner = np.empty(cells, dtype=np.int64)
    owner[order] = np.arange(cells) % n
    owner = owner.reshape(gh, gw)

    pixel_owner = np.kron(owner, np.ones((k, k), dtype=np.int64))
    masks = (pixel_owner[None, :, :] != np.arange(n)[:, None, None]).astype(np.uint8)
    return MaskSet(masks=masks, cell_size=k, subset_count=n, seed=int(seed))


def apply_mask(features, mask) -> torch.Tensor:
    """Multiply every channel of ``features`` by the ``(H, W)`` ``mask``."""
    squeeze = isinstance(features, torch.Tensor) and features.ndim == 3
    feats = as_feature_batch(features)
    m = torch.as_tensor(np.asarray(mask)) if not isinstance(mask, torch.Tensor) else mask
    if tuple(m.shape) != tuple(feats.shape[-2:]):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match feature size {tuple(feats.shape[-2:])}")
    out = feats * m.to(feats)
    return out[0] if squeeze else out


def masked_inputs(features: torch.Tensor, mask_set: MaskSet) -> list[torch.Tensor]:
    """The n masked copies of ``features``, one per subset."""
    return [apply_mask(features, mask_set.masks[i]) for i in range(mask_set.subset_count)]


def compose_restoration(partials, mask_set: MaskSet) -> torch.Tensor:
    """Union of the restored regions: each pixel comes from the partial whose mask hid it.

    Equivalent to ``sum_i partial_i * (1 - M_i)`` but exact for any finite input,
    since the hidden regions are disjoint.
    """
    if len(partials) != mask_set.subset_count:
        raise ValueError(f"expected {mask_set.subset_count} partial restorations, got {len(partials)}")
    squeeze = isinstance(partials[0], torch.Tensor) and partials[0].ndim == 3
    parts = [as_feature_batch(p, "partial") for p in partials]
    shape = parts[0].shape
    if any(p.shape != shape for p in parts):
        raise ValueError("partial restorations differ in shape")
    if tuple(shape[-2:]) != tuple(mask_set.shape):
        raise ValueError(f"mask size {tuple(mask_set.shape)} does not match partial size {tuple(shape[-2:])}")

    out = torch.zeros_like(parts[0])
    for i, part in enumerate(parts):
        hidden = torch.from_numpy(mask_set.hidden(i).astype(bool)).to(part.device)
        out = torch.where(hidden, part, out)
    return out[0] if squeeze else out
