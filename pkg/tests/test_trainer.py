import json

import numpy as np
import pytest
import torch

from mfrnet._validation import ConfigError
from mfrnet.features import BackboneConfig, MultiScaleFeatureExtractor
from mfrnet.losses import LossConfig
from mfrnet.network import RestorationNetConfig, build_network
from mfrnet.trainer import TrainConfig, TrainState, TrainingDivergedError, fit, train_step

NET = RestorationNetConfig(in_channels=4, base_channels=8, pooling_ratios=(1, 2))
LOSS = LossConfig(ssim_window=5)


def _features(n=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    coarse = torch.randn(n, 4, 4, 4, generator=g)
    return torch.nn.functional.interpolate(coarse, size=(16, 16), mode="bilinear", align_corners=False)


def _params(net):
    return [p.detach().clone() for p in net.parameters()]


def test_same_seed_same_trajectory():
    f = _features()
    cfg = TrainConfig(learning_rate=1e-3, batch_size=2, epochs=50, k_set=(2, 4, 8), seed=3)
    a = fit(f, build_network(NET, 0), cfg, LOSS)
    b = fit(f, build_network(NET, 0), cfg, LOSS)
    assert len(a.history) == 100
    assert a.history == b.history
    for p, q in zip(a.net.parameters(), b.net.parameters()):
        assert torch.equal(p, q)


def test_seed_changes_trajectory():
    f = _features()
    base = dict(learning_rate=1e-3, batch_size=2, epochs=2, k_set=(2, 4, 8))
    a = fit(f, build_network(NET, 0), TrainConfig(seed=1, **base), LOSS)
    b = fit(f, build_network(NET, 0), TrainConfig(seed=2, **base), LOSS)
    assert a.history != b.history


def test_zero_learning_rate_leaves_parameters():
    net = build_network(NET, 0)
    before = _params(net)
    state = TrainState.create(net, TrainConfig(learning_rate=0.0, k_set=(2, 4)))
    train_step(_features(2), state, TrainConfig(learning_rate=0.0, k_set=(2, 4)), LOSS)
    for p, q in zip(before, net.parameters()):
        assert torch.equal(p, q)


def test_zero_epochs_is_initialisation():
    net = build_network(NET, 0)
    before = _params(net)
    state = fit(_features(), net, TrainConfig(epochs=0, k_set=(2,)), LOSS)
    assert state.step == 0 and state.history == []
    for p, q in zip(before, net.parameters()):
        assert torch.equal(p, q)


def test_step_count_and_log(tmp_path):
    log = tmp_path / "train.jsonl"
    state = fit(_features(5), build_network(NET, 0), TrainConfig(batch_size=2, epochs=2, k_set=(2, 4)), LOSS,
                log_path=log)
    assert state.step == 2 * 3
    lines = [json.loads(s) for s in log.read_text().splitlines()]
    assert len(lines) == 6
    assert set(lines[0]) == {"step", "k", "L_Con", "L_SSIM", "L_GMS", "total"}
    assert {r["k"] for r in lines} <= {2, 4}
    for r in lines:
        assert r["total"] == pytest.approx(r["L_Con"] + r["L_SSIM"] + r["L_GMS"], rel=1e-6)


def test_on_epoch_end_called():
    seen = []
    fit(_features(2), build_network(NET, 0), TrainConfig(epochs=3, k_set=(2,)), LOSS,
        on_epoch_end=lambda s: seen.append(s.epoch))
    assert seen == [0, 1, 2]


def test_loss_decreases():
    state = fit(_features(4), build_network(NET, 0),
                TrainConfig(learning_rate=2e-3, batch_size=2, epochs=60, k_set=(2, 4)), LOSS)
    total = [r["total"] for r in state.history]
    tenth = len(total) // 10
    assert np.median(total[-tenth:]) < np.median(total[:tenth])


@pytest.mark.slow
def test_single_image_overfit_toy_backbone():
    g = torch.Generator().manual_seed(0)
    img = torch.rand(1, 3, 1, 1, generator=g) * 0.4 + 0.3
    xx = torch.linspace(0, 6.28 * 8, 64)
    img = (img + 0.2 * torch.sin(xx[None, :] + xx[:, None])).clamp(0, 1)
    f = MultiScaleFeatureExtractor(BackboneConfig(architecture="toy"), (16, 16))(img)
    f = (f - f.mean((0, 2, 3), keepdim=True)) / (f.std((0, 2, 3), keepdim=True) + 1e-6)
    net = build_network(RestorationNetConfig(f.shape[1], 8, pooling_ratios=(1, 2)), 0)
    state = fit(f, net, TrainConfig(learning_rate=2e-3, batch_size=1, epochs=500, k_set=(2, 4)), LOSS)
    total = [r["total"] for r in state.history]
    assert len(total) == 500
    assert np.median(total[-50:]) < 0.1 * total[0]


def test_nonfinite_loss_raises_with_diagnostics():
    f = _features(2)
    f[0, 0, 0, 0] = float("nan")
    state = TrainState.create(build_network(NET, 0), TrainConfig(k_set=(2,)))
    with pytest.raises(TrainingDivergedError, match=r"step 0 \(k=2, mask seed=\d+, seed=0\)"):
        train_step(f, state, TrainConfig(k_set=(2,)), LOSS)


def test_empty_dataset_and_bad_k():
    with pytest.raises(ValueError):
        fit(torch.zeros(0, 4, 16, 16), build_network(NET), TrainConfig(k_set=(2,)), LOSS)
    with pytest.raises(ConfigError):
        fit(_features(), build_network(NET), TrainConfig(k_set=(3,)), LOSS)


@pytest.mark.parametrize("kw", [dict(learning_rate=-1), dict(batch_size=0), dict(epochs=-1), dict(k_set=()),
                                dict(grad_clip=0), dict(subset_count=0), dict(mask_resampling="batch")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def _recorded_seeds(monkeypatch, mode):
    import mfrnet.trainer as trainer

    seen = []
    real = trainer.generate_masks

    def spy(h, w, k, n, seed):
        seen.append((k, seed))
        return real(h, w, k, n, seed)

    monkeypatch.setattr(trainer, "generate_masks", spy)
    cfg = TrainConfig(batch_size=1, epochs=2, k_set=(2, 4), mask_resampling=mode)
    fit(_features(6), build_network(NET, 0), cfg, LOSS)
    return seen


def test_mask_resampling_per_epoch(monkeypatch):
    seen = _recorded_seeds(monkeypatch, "epoch")
    for epoch in (seen[:6], seen[6:]):
        by_k = {}
        for k, seed in epoch:
            by_k.setdefault(k, set()).add(seed)
        assert all(len(seeds) == 1 for seeds in by_k.values())
    assert len(set(seen)) > 1


def test_mask_resampling_per_step(monkeypatch):
    seen = _recorded_seeds(monkeypatch, "step")
    assert len({seed for _, seed in seen}) == len(seen)
