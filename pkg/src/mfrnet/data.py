"""MVTec-style dataset indexing, image I/O and a procedural synthetic dataset.

Layout::

    root/train/good/*.png
    root/test/<defect_type>/*.png          (``good`` for defect-free)
    root/ground_truth/<defect_type>/<stem>_mask.png
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetIndexError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetItem:
    image: Path
    category: str
    defect_type: str
    ground_truth: Path | None = None

    @property
    def is_defective(self) -> bool:
        return self.defect_type != "good"


@dataclass
class DatasetIndex:
    root: Path
    train: list[DatasetItem] = field(default_factory=list)
    test: list[DatasetItem] = field(default_factory=list)

    def split(self, name: str) -> list[DatasetItem]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


def _images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _mask_for(gt_dir: Path, image: Path) -> Path | None:
    for suffix in (".png", image.suffix):
        candidate = gt_dir / f"{image.stem}_mask{suffix}"
        if candidate.is_file():
            return candidate
    return None


def index_dataset(root, mt_style: bool = False) -> DatasetIndex:
    """Build a validated, sorted index of an MVTec-style category folder.

    With ``mt_style`` every ``test/good`` image is moved to the training split
    (all normals used for training).
    """
    root = Path(root)
    category = root.name
    train_dir = root / "train" / "good"
    if not train_dir.is_dir():
        raise DatasetIndexError(f"missing training folder {train_dir}")
    train = [DatasetItem(p, category, "good") for p in _images(train_dir)]
    if any(p.stem.endswith("_mask") for p in _images(train_dir)):
        raise DatasetIndexError(f"ground-truth masks found inside the training split {train_dir}")

    test = []
    missing: dict[str, list[str]] = {}
    test_dir = root / "test"
    if test_dir.is_dir():
        for type_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            defect_type = type_dir.name
            for img in _images(type_dir):
                gt = None
                if defect_type != "good":
                    gt = _mask_for(root / "ground_truth" / defect_type, img)
                    if gt is None:
                        missing.setdefault(defect_type, []).append(img.name)
                test.append(DatasetItem(img, category, defect_type, gt))
    if missing:
        detail = "; ".join(f"{t}: {', '.join(names[:3])}{'...' if len(names) > 3 else ''}"
                           for t, names in missing.items())
        raise DatasetIndexError(f"missing ground-truth masks for defect types [{', '.join(missing)}] ({detail})")

    if mt_style:
        train += [it for it in test if not it.is_defective]
        test = [it for it in test if it.is_defective]
    if not train:
        raise DatasetIndexError(f"training split of {root} is empty")
    logger.info("indexed %s: %d train, %d test (%d defective)", root, len(train), len(test),
                sum(it.is_defective for it in test))
    return DatasetIndex(root=root, train=train, test=test)


def load_image(path, image_size: int | None = None) -> np.ndarray:
    """``(H, W, 3)`` float32 image in [0, 1]; grayscale is triplicated."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_mask(path, size: int | None = None) -> np.ndarray:
    """Binary ``(H, W)`` uint8 mask, nearest-neighbour resized."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return (np.asarray(im) > 127).astype(np.uint8)


def truth_for(item: DatasetItem, size: int) -> np.ndarray:
    if item.ground_truth is None:
        return np.zeros((size, size), dtype=np.uint8)
    return load_mask(item.ground_truth, size)


class FeatureCache:
    """Per-image aggregated features cached on disk, keyed by image bytes and backbone."""

    def __init__(self, directory, backbone_checksum: str, feature_size: int, image_size: int):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.tag = f"{backbone_checksum[:16]}-{image_size}-{feature_size}"

    def _key(self, path: Path) -> Path:
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:24]
        return self.directory / f"{digest}-{self.tag}.pt"

    def get_or_compute(self, paths, compute) -> torch.Tensor:
        out, todo = [None] * len(paths), []
        for i, p in enumerate(paths):
            key = self._key(p)
            if key.exists():
                out[i] = torch.load(key, weights_only=True)
            else:
                todo.append(i)
        if todo:
            fresh = compute([paths[i] for i in todo])
            for j, i in enumerate(todo):
                out[i] = fresh[j]
                tmp = self._key(paths[i]).with_suffix(".tmp")
                torch.save(fresh[j].clone(), tmp)
                tmp.replace(self._key(paths[i]))
        return torch.stack(out)


# -- synthetic textures ----------------------------------------------------

def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Diagonal sinusoidal grating with jittered period and angle, random phase and brightness, plus noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.pi / 4 + rng.uniform(-0.1, 0.1)
    freq = 2 * np.pi / rng.uniform(7.5, 8.5)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.18, 0.22)
    g = rng.uniform(0.3, 0.7) + amp * np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    g += rng.normal(0.0, 0.03, size=(size, size))
    return g


def _blob(rng, size):
    cy, cx = rng.uniform(size * 0.15, size * 0.85, size=2)
    ry, rx = rng.uniform(size * 0.06, size * 0.11, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _scratch(rng, size):
    length = rng.uniform(size * 0.2, size * 0.4)
    angle = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(size * 0.25, size * 0.75, size=2)
    width = rng.uniform(1.5, 2.5)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = np.sin(angle), np.cos(angle)
    t = (xx - cx) * dx + (yy - cy) * dy
    d = np.abs(-(xx - cx) * dy + (yy - cy) * dx)
    return (np.abs(t) <= length / 2) & (d <= width)


def _defect(rng, img, size, min_frac, max_frac):
    for _ in range(100):
        kind = "blob" if rng.random() < 0.5 else "scratch"
        mask = _blob(rng, size) if kind == "blob" else _scratch(rng, size)
        if min_frac <= mask.mean() <= max_frac:
            break
    else:  # pragma: no cover - guarded by the shape parameters
        raise RuntimeError("could not place a defect in the requested size band")
    # contrast inversion of the texture about its local mean, plus a small offset:
    # locally plausible, anomalous only with respect to its surroundings
    out = img.copy()
    level = img[mask].mean() + rng.uniform(0.05, 0.1) * rng.choice([-1.0, 1.0])
    out[mask] = 2 * level - img[mask]
    return np.clip(out, 0, 1), mask, kind


def _save_png(arr: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def make_synthetic_dataset(out, normal_count: int = 20, defect_count: int = 30, seed: int = 7,
                           image_size: int = 64, test_good_count: int = 0,
                           min_defect_fraction: float = 0.005, max_defect_fraction: float = 0.05) -> DatasetIndex:
    """Write a deterministic MVTec-style dataset of textured images with pasted defects.

    Defects are contrast blobs or scratch lines covering between 0.5 % and 5 %
    of the image, each with an exact binary mask.
    """
    if normal_count < 1 or defect_count < 1:
        raise ValueError("normal_count and defect_count must be >= 1")
    out = Path(out)
    rng = np.random.default_rng(seed)

    def to_u8(a):
        return (np.clip(a, 0, 1) * 255 + 0.5).astype(np.uint8)

    for i in range(normal_count):
        _save_png(to_u8(_texture(rng, image_size)), out / "train" / "good" / f"{i:03d}.png")
    for i in range(test_good_count):
        _save_png(to_u8(_texture(rng, image_size)), out / "test" / "good" / f"{i:03d}.png")
    for i in range(defect_count):
        img, mask, kind = _defect(rng, _texture(rng, image_size), image_size,
                                  min_defect_fraction, max_defect_fraction)
        _save_png(to_u8(img), out / "test" / kind / f"{i:03d}.png")
        _save_png(mask.astype(np.uint8) * 255, out / "ground_truth" / kind / f"{i:03d}_mask.png")
    return index_dataset(out)
