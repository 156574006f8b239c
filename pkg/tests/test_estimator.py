import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mfrnet import MFRNet
from mfrnet._validation import ConfigError
from mfrnet.data import load_image, make_synthetic_dataset
from mfrnet.estimator import FeatureAggregator, check_images

FAST = dict(backbone="toy", image_size=32, feature_size=16, base_channels=8, pooling_ratios=(1, 2),
            k_set=(2, 4), ssim_window=5, learning_rate=2e-3, batch_size=2, epochs=8, smoothing_sigma=1.0)


@pytest.fixture(scope="module")
def normals(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    idx = make_synthetic_dataset(root, normal_count=30, defect_count=1, seed=11, image_size=32)
    return np.stack([load_image(it.image) for it in idx.train])


@pytest.fixture(scope="module")
def fitted(normals):
    return MFRNet(**FAST).fit(normals[:8])


def test_get_params_and_clone():
    m = MFRNet(**FAST)
    assert m.get_params()["k_set"] == (2, 4)
    c = clone(m)
    assert c.get_params() == m.get_params() and c is not m
    m.set_params(subset_count=5)
    assert m.subset_count == 5


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MFRNet(**FAST).predict(np.zeros((1, 32, 32, 3)))


def test_invalid_params(normals):
    with pytest.raises(ConfigError):
        MFRNet(**{**FAST, "k_set": (3,)}).fit(normals[:2])
    with pytest.raises(ConfigError):
        MFRNet(**{**FAST, "feature_size": 18}).fit(normals[:2])


def test_fit_attributes(fitted):
    assert fitted.n_features_in_ == 56
    assert fitted.n_steps_ == 8 * 4
    assert len(fitted.history_) == fitted.n_steps_
    assert fitted.feature_std_.min() > 0


def test_fit_keeps_backbone_frozen(fitted):
    assert fitted.aggregator_.extractor_.checksum() == fitted.backbone_checksum_
    assert all(not p.requires_grad for p in fitted.aggregator_.extractor_.parameters())


def test_outputs_shapes(fitted, normals):
    X = normals[8:11]
    assert fitted.predict(X).shape == (3, 32, 32)
    s = fitted.score_samples(X)
    assert s.shape == (3,) and np.isfinite(s).all()
    assert np.array_equal(fitted.decision_function(X), s)
    assert fitted.transform(X).shape == (3, 56, 16, 16)


def test_fit_deterministic(normals, fitted):
    again = MFRNet(**FAST).fit(normals[:8])
    assert again.history_ == fitted.history_
    assert np.array_equal(again.predict(normals[8:10]), fitted.predict(normals[8:10]))


def test_save_load_bitwise(tmp_path, fitted, normals):
    fitted.save(tmp_path / "m.ckpt")
    loaded = MFRNet.load(tmp_path / "m.ckpt")
    assert loaded.get_params() == fitted.get_params()
    assert np.array_equal(loaded.predict(normals[8:11]), fitted.predict(normals[8:11]))


def test_load_rejects_other_backbone(tmp_path, fitted):
    fitted.save(tmp_path / "m.ckpt")
    payload = torch.load(tmp_path / "m.ckpt", weights_only=False)
    payload["extra"]["backbone_checksum"] = "0" * 64
    torch.save(payload, tmp_path / "bad.ckpt")
    with pytest.raises(ValueError, match="backbone"):
        MFRNet.load(tmp_path / "bad.ckpt")


def test_fit_features_matches_fit(normals, fitted):
    feats = FeatureAggregator("toy", image_size=32, feature_size=16).fit().transform(normals[:8])
    other = MFRNet(**FAST).fit_features(feats)
    assert other.history_ == fitted.history_


@pytest.mark.slow
def test_larger_defect_never_lowers_score(synthetic_experiment):
    model = synthetic_experiment.run()[0]
    rng = np.random.default_rng(123)
    small, large = [], []
    for img in synthetic_experiment.train[rng.permutation(20)]:
        y, x = rng.integers(16, 32, size=2)
        noise = rng.uniform(0, 1, size=(64, 64, 3)).astype(np.float32)
        for size, dst in ((8, small), (16, large)):
            out = img.copy()
            out[y:y + size, x:x + size] = noise[y:y + size, x:x + size]
            dst.append(out)
    s_small, s_large = model.score_samples(np.stack(small)), model.score_samples(np.stack(large))
    assert np.mean(s_large >= s_small) >= 0.9


@pytest.mark.parametrize("shape", [(32, 32), (32, 32, 1), (32, 32, 3), (3, 32, 32), (40, 24, 3)])
def test_check_images_layouts(shape):
    rng = np.random.default_rng(0)
    out = check_images([rng.integers(0, 256, size=shape, dtype=np.uint8)], 32)
    assert out.shape == (1, 3, 32, 32)
    assert 0 <= out.min() and out.max() <= 1


def test_check_images_batch_and_errors():
    assert check_images(np.zeros((4, 16, 16, 3), np.float32), 16).shape == (4, 3, 16, 16)
    assert check_images(torch.zeros(2, 3, 16, 16), 16).shape == (2, 3, 16, 16)
    with pytest.raises(ValueError):
        check_images([], 16)
    with pytest.raises(ValueError):
        check_images([np.zeros((16, 16, 5))], 16)
    with pytest.raises(ValueError):
        check_images([np.full((16, 16), np.nan)], 16)
