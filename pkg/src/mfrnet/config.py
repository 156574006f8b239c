"""Run configuration: a YAML file with nested sections, validated against a JSON schema."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from ._validation import ConfigError, check_k_set

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "mfrnet run config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "backbone": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "architecture": {"enum": ["vgg16", "toy"]},
                "layers": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "weights": {"type": "string"},
            },
        },
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "image_size": {"type": "integer", "minimum": 8},
                "feature_size": {"type": "integer", "minimum": 4},
                "train_root": {"type": ["string", "null"]},
                "subsample": {"type": ["integer", "null"], "minimum": 1},
                "mt_style": {"type": "boolean"},
            },
        },
        "net": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "base_channels": {"type": "integer", "minimum": 1},
                "pooling_ratios": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "stage_blocks": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                 "minItems": 5, "maxItems": 5},
            },
        },
        "loss": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "ssim_window": {"type": "integer", "minimum": 3},
                "ssim_a1": {"type": "number", "exclusiveMinimum": 0},
                "ssim_a2": {"type": "number", "exclusiveMinimum": 0},
                "gms_b": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "masking": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "k_set": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "subset_count": {"type": "integer", "minimum": 1},
                "resampling": {"enum": ["step", "epoch"]},
            },
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 0},
                "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "checkpoint_interval": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer"},
            },
        },
        "inference": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer"},
                "smoothing_sigma": {"type": ["number", "null"], "minimum": 0},
            },
        },
        "output_dir": {"type": "string"},
    },
}


@dataclass
class BackboneSection:
    architecture: str = "vgg16"
    layers: list = field(default_factory=lambda: [1, 2, 3])
    weights: str = "random-frozen"


@dataclass
class DataSection:
    image_size: int = 256
    feature_size: int = 64
    train_root: str | None = None
    subsample: int | None = None
    mt_style: bool = False


@dataclass
class NetSection:
    base_channels: int = 64
    pooling_ratios: list = field(default_factory=lambda: [2, 3, 4, 5])
    stage_blocks: list = field(default_factory=lambda: [1, 2, 4, 2, 1])


@dataclass
class LossSection:
    ssim_window: int = 11
    ssim_a1: float = 1e-4
    ssim_a2: float = 1e-4
    gms_b: float = 1e-4


@dataclass
class MaskingSection:
    k_set: list = field(default_factory=lambda: [2, 4, 8, 16])
    subset_count: int = 3
    resampling: str = "step"


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 6
    epochs: int = 400
    grad_clip: float | None = 5.0
    checkpoint_interval: int = 0
    seed: int = 0


@dataclass
class InferenceSection:
    seed: int = 0
    smoothing_sigma: float | None = 4.0


_SECTIONS = {
    "backbone": BackboneSection, "data": DataSection, "net": NetSection, "loss": LossSection,
    "masking": MaskingSection, "train": TrainSection, "inference": InferenceSection,
}


@dataclass
class RunConfig:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    loss: LossSection = field(default_factory=LossSection)
    masking: MaskingSection = field(default_factory=MaskingSection)
    train: TrainSection = field(default_factory=TrainSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = d or {}
        try:
            jsonschema.validate(d, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from None
        kwargs = {name: sec(**d.get(name, {})) for name, sec in _SECTIONS.items()}
        cfg = cls(**kwargs, output_dir=d.get("output_dir", "runs/default"))
        cfg.check()
        return cfg

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def check(self) -> None:
        """Cross-field consistency that the schema cannot express."""
        fs = self.data.feature_size
        if fs % 4:
            raise ConfigError("data.feature_size must be divisible by 4")
        check_k_set(self.masking.k_set, (fs, fs))
        if self.loss.ssim_window % 2 == 0 or self.loss.ssim_window > fs:
            raise ConfigError("loss.ssim_window must be odd and no larger than data.feature_size")
        if sorted(set(self.backbone.layers)) != list(self.backbone.layers):
            raise ConfigError("backbone.layers must be strictly increasing")
        stage3 = fs // 4
        if max(self.net.pooling_ratios) > stage3:
            raise ConfigError(f"pooling ratio {max(self.net.pooling_ratios)} exceeds the "
                              f"{stage3}x{stage3} bottleneck grid")

    def estimator_params(self) -> dict:
        return dict(
            backbone=self.backbone.architecture, layers=tuple(self.backbone.layers),
            backbone_weights=self.backbone.weights, image_size=self.data.image_size,
            feature_size=self.data.feature_size, base_channels=self.net.base_channels,
            pooling_ratios=tuple(self.net.pooling_ratios), stage_blocks=tuple(self.net.stage_blocks),
            k_set=tuple(self.masking.k_set), subset_count=self.masking.subset_count,
            mask_resampling=self.masking.resampling,
            learning_rate=self.train.learning_rate, weight_decay=self.train.weight_decay,
            batch_size=self.train.batch_size, epochs=self.train.epochs, grad_clip=self.train.grad_clip,
            ssim_window=self.loss.ssim_window, ssim_a1=self.loss.ssim_a1, ssim_a2=self.loss.ssim_a2,
            gms_b=self.loss.gms_b, smoothing_sigma=self.inference.smoothing_sigma, seed=self.train.seed,
            inference_seed=self.inference.seed,
        )

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with ``section={"key": value}`` overrides applied and re-validated."""
        d = self.to_dict()
        for section, values in sections.items():
            if isinstance(values, dict):
                d.setdefault(section, {}).update(values)
            else:
                d[section] = values
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return RunConfig.from_dict(raw or {})


def dump_config(config: RunConfig, path=None) -> str:
    text = yaml.safe_dump(config.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def packaged_config(name: str) -> RunConfig:
    """One of the shipped configs: ``default`` or ``toy``."""
    text = resources.files("mfrnet.configs").joinpath(f"{name}.yaml").read_text()
    return RunConfig.from_dict(yaml.safe_load(text))
