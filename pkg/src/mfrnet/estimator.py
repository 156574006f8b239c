"""scikit-learn style estimators wrapping the full pipeline."""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, check_k_set
from .features import BackboneConfig, MultiScaleFeatureExtractor
from .inference import AnomalyMap, detect_features
from .losses import LossConfig
from .network import (CHECKPOINT_MAGIC, RestorationNetConfig, build_network, load_checkpoint,
                      save_checkpoint)
from .trainer import TrainConfig, fit as fit_network

logger = logging.getLogger(__name__)

# channels whose training std falls below this fraction of the median std are not amplified
STD_FLOOR_FRACTION = 0.1


def check_images(X, image_size: int) -> torch.Tensor:
    """Coerce images to a ``(N, 3, S, S)`` float tensor in [0, 1].

    Accepts a list or array of ``(H, W)``, ``(H, W, 1|3)`` or ``(3, H, W)``
    images, uint8 or float. Grayscale is triplicated; images are resized
    bilinearly to ``image_size``.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    if isinstance(X, np.ndarray):
        if X.ndim == 2 or (X.ndim == 3 and (X.shape[-1] in (1, 3) or X.shape[0] in (1, 3))):
            items = [X]
        else:
            items = list(X)
    else:
        items = list(X)
    if not items:
        raise ValueError("no images given")
    out = []
    for i, img in enumerate(items):
        a = np.asarray(img)
        if a.dtype == np.uint8:
            a = a.astype(np.float32) / 255.0
        else:
            a = a.astype(np.float32)
        if a.ndim == 2:
            a = a[None]
        elif a.ndim == 3 and a.shape[-1] in (1, 3) and a.shape[0] not in (1, 3):
            a = np.moveaxis(a, -1, 0)
        if a.ndim != 3 or a.shape[0] not in (1, 3):
            raise ValueError(f"image {i} has unsupported shape {np.shape(img)}")
        if a.shape[0] == 1:
            a = np.repeat(a, 3, axis=0)
        if not np.isfinite(a).all():
            raise ValueError(f"image {i} contains non-finite values")
        t = torch.from_numpy(np.ascontiguousarray(a))[None]
        if tuple(t.shape[-2:]) != (image_size, image_size):
            t = F.interpolate(t, size=(image_size, image_size), mode="bilinear", align_corners=False)
        out.append(t)
    return torch.cat(out).clamp_(0.0, 1.0)


class FeatureAggregator(TransformerMixin, BaseEstimator):
    """Images -> aligned multi-scale feature maps from a frozen backbone.

    ``fit`` only builds the backbone; nothing is learned.
    """

    def __init__(self, backbone="vgg16", layers=(1, 2, 3), backbone_weights="random-frozen",
                 image_size=256, feature_size=64, batch_size=16):
        self.backbone = backbone
        self.layers = layers
        self.backbone_weights = backbone_weights
        self.image_size = image_size
        self.feature_size = feature_size
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        config = BackboneConfig(architecture=self.backbone, layer_indices=tuple(self.layers),
                                weights=str(self.backbone_weights))
        self.extractor_ = MultiScaleFeatureExtractor(config, (self.feature_size, self.feature_size))
        self.n_features_out_ = self.extractor_.out_channels
        return self

    def transform_tensor(self, X) -> torch.Tensor:
        check_is_fitted(self, "extractor_")
        images = check_images(X, self.image_size)
        chunks = [self.extractor_(images[i:i + self.batch_size])
                  for i in range(0, images.shape[0], self.batch_size)]
        return torch.cat(chunks)

    def transform(self, X):
        return self.transform_tensor(X).numpy()


class MFRNet(BaseEstimator):
    """Unsupervised anomaly detector trained on normal images only.

    ``fit`` takes normal images. ``predict`` returns per-pixel anomaly maps at
    ``image_size``; ``score_samples`` returns one score per image (the map
    maximum). ``transform`` gives the standardised multi-scale features.

    Defaults follow the reference setup: VGG16 blocks 1-3, 256 px input,
    64 x 64 features, n = 3, K = {2, 4, 8, 16}, R = {2, 3, 4, 5}, C0 = 64,
    AdamW lr 1e-4 / wd 1e-3, batch 6, 400 epochs.
    """

    def __init__(self, backbone="vgg16", layers=(1, 2, 3), backbone_weights="random-frozen",
                 image_size=256, feature_size=64, base_channels=64, pooling_ratios=(2, 3, 4, 5),
                 stage_blocks=(1, 2, 4, 2, 1), k_set=(2, 4, 8, 16), subset_count=3,
                 learning_rate=1e-4, weight_decay=1e-3, batch_size=6, epochs=400, grad_clip=5.0,
                 ssim_window=11, ssim_a1=1e-4, ssim_a2=1e-4, gms_b=1e-4, smoothing_sigma=4.0,
                 mask_resampling="step", seed=0, inference_seed=None, device=None, log_path=None):
        self.backbone = backbone
        self.layers = layers
        self.backbone_weights = backbone_weights
        self.image_size = image_size
        self.feature_size = feature_size
        self.base_channels = base_channels
        self.pooling_ratios = pooling_ratios
        self.stage_blocks = stage_blocks
        self.k_set = k_set
        self.subset_count = subset_count
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.grad_clip = grad_clip
        self.ssim_window = ssim_window
        self.ssim_a1 = ssim_a1
        self.ssim_a2 = ssim_a2
        self.gms_b = gms_b
        self.smoothing_sigma = smoothing_sigma
        self.mask_resampling = mask_resampling
        self.seed = seed
        self.inference_seed = inference_seed
        self.device = device
        self.log_path = log_path

    # -- configuration -------------------------------------------------

    def _device(self) -> str:
        return self.device or os.environ.get("MFRNET_DEVICE", "cpu")

    def _inference_seed(self) -> int:
        return self.seed if self.inference_seed is None else self.inference_seed

    def loss_config(self) -> LossConfig:
        return LossConfig(ssim_window=self.ssim_window, ssim_a1=self.ssim_a1,
                          ssim_a2=self.ssim_a2, gms_b=self.gms_b)

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, epochs=self.epochs, k_set=tuple(self.k_set),
                           subset_count=self.subset_count, seed=self.seed, grad_clip=self.grad_clip,
                           device=self._device(), mask_resampling=self.mask_resampling)

    def net_config(self, in_channels: int) -> RestorationNetConfig:
        return RestorationNetConfig(in_channels=in_channels, base_channels=self.base_channels,
                                    pooling_ratios=tuple(self.pooling_ratios),
                                    stage_blocks=tuple(self.stage_blocks))

    def _validate_params(self):
        if self.feature_size % 4:
            raise ConfigError("feature_size must be divisible by 4")
        check_k_set(self.k_set, (self.feature_size, self.feature_size))
        self.loss_config()
        if self.ssim_window > self.feature_size:
            raise ConfigError("ssim_window exceeds feature_size")

    # -- fitting -------------------------------------------------------

    def _build_aggregator(self) -> FeatureAggregator:
        return FeatureAggregator(self.backbone, self.layers, self.backbone_weights,
                                 self.image_size, self.feature_size).fit()

    def fit(self, X, y=None, on_epoch_end=None):
        """Train on normal images ``X``. ``y`` is ignored (unsupervised)."""
        self._validate_params()
        self.aggregator_ = self._build_aggregator()
        feats = self.aggregator_.transform_tensor(X)
        return self._fit_raw_features(feats, on_epoch_end=on_epoch_end)

    def fit_features(self, features, on_epoch_end=None):
        """Train on precomputed, unnormalised aggregated features ``(N, C, H, W)``."""
        self._validate_params()
        if not hasattr(self, "aggregator_"):
            self.aggregator_ = self._build_aggregator()
        return self._fit_raw_features(torch.as_tensor(features), on_epoch_end=on_epoch_end)

    def _fit_raw_features(self, feats: torch.Tensor, on_epoch_end=None):
        if feats.ndim != 4 or feats.shape[0] == 0:
            raise ValueError("need at least one training image")
        self.feature_mean_ = feats.mean(dim=(0, 2, 3))
        std = feats.std(dim=(0, 2, 3), unbiased=False)
        floor = max(float(std.median()) * STD_FLOOR_FRACTION, 1e-6)
        self.feature_std_ = std.clamp_min(floor)
        self.n_features_in_ = feats.shape[1]
        normed = self._standardize(feats)
        self.net_ = build_network(self.net_config(feats.shape[1]), seed=self.seed)
        state = fit_network(normed, self.net_, self.train_config(), self.loss_config(),
                            log_path=self.log_path,
                            on_epoch_end=(lambda s: on_epoch_end(self, s)) if on_epoch_end else None)
        self.net_.to("cpu")
        self.history_ = state.history
        self.n_steps_ = state.step
        self.backbone_checksum_ = self.aggregator_.extractor_.checksum()
        return self

    # -- inference -----------------------------------------------------

    def _standardize(self, feats: torch.Tensor) -> torch.Tensor:
        return (feats - self.feature_mean_.view(1, -1, 1, 1)) / self.feature_std_.view(1, -1, 1, 1)

    def transform(self, X):
        """Standardised aggregated features, ``(N, C, F, F)``."""
        check_is_fitted(self, "net_")
        return self._standardize(self.aggregator_.transform_tensor(X)).numpy()

    def detect(self, X, masking_sizes=None, subset_count=None, seed=None,
               smoothing_sigma="default", batch_size=8) -> list[AnomalyMap]:
        check_is_fitted(self, "net_")
        feats = self._standardize(self.aggregator_.transform_tensor(X))
        sigma = self.smoothing_sigma if smoothing_sigma == "default" else smoothing_sigma
        out = []
        for i in range(0, feats.shape[0], batch_size):
            out.extend(detect_features(
                feats[i:i + batch_size], self.net_,
                masking_sizes=tuple(masking_sizes or self.k_set),
                subset_count=subset_count or self.subset_count,
                seed=self._inference_seed() if seed is None else seed,
                image_size=(self.image_size, self.image_size),
                smoothing_sigma=sigma, loss_config=self.loss_config()))
        return out

    def predict(self, X) -> np.ndarray:
        """Per-pixel anomaly maps ``(N, image_size, image_size)``."""
        return np.stack([m.scores for m in self.detect(X)])

    def score_samples(self, X) -> np.ndarray:
        """Image-level anomaly scores (higher = more anomalous)."""
        return np.array([m.image_score for m in self.detect(X)])

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X)

    # -- persistence ---------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        extra = {
            "estimator_params": _plain(self.get_params()),
            "feature_mean": self.feature_mean_.clone(),
            "feature_std": self.feature_std_.clone(),
            "backbone_checksum": self.backbone_checksum_,
        }
        save_checkpoint(path, self.net_, step=getattr(self, "n_steps_", 0), extra=extra)

    @classmethod
    def load(cls, path) -> "MFRNet":
        net, payload = load_checkpoint(path)
        extra = payload.get("extra", {})
        if "estimator_params" not in extra:
            raise ValueError(f"{path} holds a bare network, not a fitted {CHECKPOINT_MAGIC} estimator")
        params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in extra["estimator_params"].items()}
        model = cls(**params)
        model.aggregator_ = model._build_aggregator()
        checksum = model.aggregator_.extractor_.checksum()
        if checksum != extra["backbone_checksum"]:
            raise ValueError("backbone weights differ from the ones used in training")
        model.net_ = net.eval()
        model.feature_mean_ = extra["feature_mean"]
        model.feature_std_ = extra["feature_std"]
        model.n_features_in_ = net.config.in_channels
        model.n_steps_ = payload["step"]
        model.backbone_checksum_ = checksum
        return model


def _plain(params: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}
