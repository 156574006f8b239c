"""Multi-feature reconstruction network with crossed-mask restoration for anomaly detection."""

from .estimator import FeatureAggregator, MFRNet, check_images
from .features import BackboneConfig, MultiScaleFeatureExtractor, aggregate, extract_features
from .inference import AnomalyMap, detect, detect_features, score_for_k
from .losses import (LossConfig, contextual_loss, gms_loss, gms_map, hybrid_loss, ssim_loss,
                     ssim_map)
from .masks import MaskSet, apply_mask, compose_restoration, generate_masks
from .metrics import EvalReport, auroc, best_f1_sweep, binarize_and_confuse, mae
from .network import RestorationNet, RestorationNetConfig, build_network
from .trainer import TrainConfig, TrainState, fit, train_step

__version__ = "0.1.0"
