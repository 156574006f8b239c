"""Training loop for the restoration network on normal images only."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from ._validation import ConfigError, check_k_set
from .losses import LossConfig, hybrid_loss
from .masks import compose_restoration, generate_masks, masked_inputs
from .network import RestorationNet

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 6
    epochs: int = 400
    k_set: tuple[int, ...] = (2, 4, 8, 16)
    subset_count: int = 3
    seed: int = 0
    grad_clip: float | None = 5.0
    checkpoint_interval: int = 0  # epochs; 0 disables periodic checkpoints
    device: str = "cpu"
    mask_resampling: str = "step"  # "step": new partition every step; "epoch": one per (epoch, k)

    def __post_init__(self):
        object.__setattr__(self, "k_set", tuple(int(k) for k in self.k_set))
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.subset_count < 1:
            raise ConfigError("batch_size and subset_count must be >= 1, epochs >= 0")
        if not self.k_set or min(self.k_set) < 1:
            raise ConfigError("k_set must hold positive integers")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or None")
        if self.mask_resampling not in ("step", "epoch"):
            raise ConfigError("mask_resampling must be 'step' or 'epoch'")


@dataclass
class TrainState:
    net: RestorationNet
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, net: RestorationNet, config: TrainConfig) -> "TrainState":
        # decoupled weight decay: with lr = 0 parameters stay untouched
        opt = torch.optim.AdamW(net.parameters(), lr=config.learning_rate,
                                weight_decay=config.weight_decay, betas=(0.9, 0.999))
        return cls(net=net, optimizer=opt, rng=np.random.default_rng(config.seed))


def restore(net: RestorationNet, features: torch.Tensor, mask_set) -> torch.Tensor:
    """Run the n masked restorations as one batched forward and compose them."""
    inputs = masked_inputs(features, mask_set)
    n, b = len(inputs), features.shape[0]
    out = net(torch.cat(inputs, dim=0))
    return compose_restoration(list(out.split(b, dim=0)), mask_set)


def train_step(batch: torch.Tensor, state: TrainState, config: TrainConfig,
               loss_config: LossConfig = LossConfig()) -> TrainState:
    """One optimizer update with a freshly sampled k and mask set."""
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise ValueError("batch must be a non-empty (N, C, H, W) tensor")
    ks = check_k_set(config.k_set, batch.shape[-2:])
    k = ks[int(state.rng.integers(len(ks)))]
    mask_seed = int(state.rng.integers(2**31 - 1))
    if config.mask_resampling == "epoch":
        mask_seed = int(np.random.SeedSequence([config.seed, state.epoch, k]).generate_state(1)[0])
    mask_set = generate_masks(batch.shape[-2], batch.shape[-1], k, config.subset_count, mask_seed)

    net = state.net
    net.train()
    state.optimizer.zero_grad(set_to_none=True)
    recon = restore(net, batch, mask_set)
    loss = hybrid_loss(batch, recon, loss_config)
    if not torch.isfinite(loss.total):
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step} (k={k}, mask seed={mask_seed}, seed={config.seed}): "
            f"{loss.as_floats()}")
    loss.total.backward()
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
    state.optimizer.step()

    record = {"step": state.step, "k": k, **loss.as_floats()}
    state.history.append(record)
    state.step += 1
    return state


def fit(features: torch.Tensor, net: RestorationNet, config: TrainConfig,
        loss_config: LossConfig = LossConfig(), log_path=None,
        on_epoch_end: Callable[[TrainState], None] | None = None) -> TrainState:
    """Train ``net`` on precomputed ``(N, C, H, W)`` normal features.

    Runs ``epochs * ceil(N / batch_size)`` steps. ``log_path`` receives one JSON
    line per step. ``on_epoch_end`` is called after every epoch (checkpointing).
    """
    if features.ndim != 4 or features.shape[0] == 0:
        raise ValueError("training set is empty")
    check_k_set(config.k_set, features.shape[-2:])
    device = torch.device(config.device)
    net.to(device)
    features = features.to(device)
    state = TrainState.create(net, config)
    n = features.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)

    log = open(log_path, "a") if log_path else None
    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            order = state.rng.permutation(n)
            for s in range(steps_per_epoch):
                idx = torch.from_numpy(order[s * config.batch_size:(s + 1) * config.batch_size])
                train_step(features[idx.to(device)], state, config, loss_config)
                if log is not None:
                    log.write(json.dumps(state.history[-1]) + "\n")
            if logger.isEnabledFor(logging.INFO):
                recent = state.history[-steps_per_epoch:]
                logger.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs,
                            float(np.mean([r["total"] for r in recent])))
            if on_epoch_end is not None:
                on_epoch_end(state)
    finally:
        if log is not None:
            log.close()
    net.eval()
    return state


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
