"""Dataset-level orchestration shared by the CLI and the acceptance experiment."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import (IMAGE_SUFFIXES, DatasetIndex, DatasetIndexError, FeatureCache, index_dataset,
                   load_image, truth_for)
from .estimator import MFRNet
from .inference import write_heatmap
from .metrics import EvalReport, best_f1_sweep

logger = logging.getLogger(__name__)


def check_unsupervised(root) -> None:
    """Refuse to train if any ground-truth mask is reachable from the training split."""
    train_dir = Path(root) / "train"
    for p in train_dir.rglob("*"):
        if p.is_dir() and p.name == "ground_truth":
            raise DatasetIndexError(f"ground-truth folder inside the training split: {p}")
        if p.is_file() and p.stem.endswith("_mask"):
            raise DatasetIndexError(f"ground-truth mask inside the training split: {p}")
        if p.is_symlink() and "ground_truth" in Path(os.path.realpath(p)).parts:
            raise DatasetIndexError(f"training item links into ground truth: {p}")


def load_images(paths, image_size: int) -> np.ndarray:
    return np.stack([load_image(p, image_size) for p in paths])


def subsample_items(items, count: int | None, seed: int):
    if count is None or count >= len(items):
        return list(items)
    keep = np.sort(np.random.default_rng(seed).choice(len(items), size=count, replace=False))
    return [items[i] for i in keep]


def train_on_index(config: RunConfig, index: DatasetIndex, log_path=None, checkpoint_dir=None) -> MFRNet:
    """Fit one model on the normal training images of ``index``."""
    items = subsample_items(index.train, config.data.subsample, config.train.seed)
    model = MFRNet(**config.estimator_params(), log_path=log_path)
    model.aggregator_ = model._build_aggregator()
    paths = [it.image for it in items]
    size = config.data.image_size

    def compute(ps):
        return model.aggregator_.transform_tensor(load_images(ps, size))

    cache_dir = os.environ.get("MFRNET_CACHE_DIR")
    if cache_dir:
        cache = FeatureCache(cache_dir, model.aggregator_.extractor_.checksum(), config.data.feature_size, size)
        feats = cache.get_or_compute(paths, compute)
    else:
        feats = compute(paths)

    callback = None
    interval = config.train.checkpoint_interval
    if checkpoint_dir and interval:
        checkpoint_dir = Path(checkpoint_dir)

        def callback(est, state):
            if (state.epoch + 1) % interval == 0:
                est.net_.eval()
                est.history_, est.n_steps_ = state.history, state.step
                est.backbone_checksum_ = est.aggregator_.extractor_.checksum()
                est.save(checkpoint_dir / f"epoch_{state.epoch + 1:04d}.ckpt")
                est.net_.train()

    logger.info("training on %d normal images from %s", len(items), index.root)
    return model.fit_features(feats, on_epoch_end=callback)


def evaluate_index(model: MFRNet, index: DatasetIndex, out_dir=None, num_thresholds: int = 256,
                   batch_size: int = 8) -> EvalReport:
    """Pixel-level evaluation over the test split; optionally writes heatmaps."""
    items = index.test
    if not items:
        raise DatasetIndexError(f"test split of {index.root} is empty")
    size = model.image_size
    preds, truths = [], []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        maps = model.detect(load_images([it.image for it in chunk], size))
        for it, amap in zip(chunk, maps):
            preds.append(amap.scores)
            truths.append(truth_for(it, size))
            if out_dir is not None:
                rel = it.image.relative_to(index.root / "test").with_suffix(".png")
                write_heatmap(amap, Path(out_dir) / "heatmaps" / rel,
                              {"path": str(it.image), "defect_type": it.defect_type})
    _, report = best_f1_sweep(preds, truths, num_thresholds)
    for dtype in sorted({it.defect_type for it in items}):
        sel = [i for i, it in enumerate(items) if it.defect_type == dtype]
        if any(truths[i].any() for i in sel):
            _, sub = best_f1_sweep([preds[i] for i in sel], [truths[i] for i in sel], num_thresholds)
            report.per_category[dtype] = sub
    return report


def iter_images(directory) -> list[Path]:
    directory = Path(directory)
    if directory.is_file():
        return [directory]
    return sorted(p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def infer_directory(model: MFRNet, images_dir, out_dir, batch_size: int = 8) -> list[dict]:
    """Heatmaps mirroring input paths, plus ``records.jsonl`` with one line per image."""
    images_dir, out_dir = Path(images_dir), Path(out_dir)
    paths = iter_images(images_dir)
    if not paths:
        raise FileNotFoundError(f"no images under {images_dir}")
    base = images_dir if images_dir.is_dir() else images_dir.parent
    records = []
    for start in range(0, len(paths), batch_size):
        chunk = paths[start:start + batch_size]
        for p, amap in zip(chunk, model.detect(load_images(chunk, model.image_size))):
            record = {"path": str(p), "image_score": amap.image_score,
                      "k_values": list(amap.k_values_used), "seed": amap.seed}
            write_heatmap(amap, out_dir / p.relative_to(base).with_suffix(".png"), record)
            records.append(record)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "records.jsonl.tmp"
    tmp.write_text("".join(json.dumps(r) + "\n" for r in records))
    tmp.replace(out_dir / "records.jsonl")
    return records


def category_roots(root) -> dict[str, Path]:
    """A single category folder, or every category folder under a dataset root."""
    root = Path(root)
    if (root / "train").is_dir():
        return {root.name: root}
    cats = {d.name: d for d in sorted(root.iterdir()) if d.is_dir() and (d / "train").is_dir()}
    if not cats:
        raise DatasetIndexError(f"{root} is neither a category folder nor a dataset root")
    return cats


def index_categories(root, mt_style: bool = False) -> dict[str, DatasetIndex]:
    return {name: index_dataset(path, mt_style=mt_style) for name, path in category_roots(root).items()}
