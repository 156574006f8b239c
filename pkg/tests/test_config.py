import pytest

from mfrnet._validation import ConfigError
from mfrnet.config import RunConfig, dump_config, load_config, packaged_config


@pytest.mark.parametrize("name", ["default", "toy"])
def test_packaged_configs_round_trip(tmp_path, name):
    cfg = packaged_config(name)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_default_config_values():
    p = packaged_config("default").estimator_params()
    assert p["backbone"] == "vgg16" and p["layers"] == (1, 2, 3)
    assert p["image_size"] == 256 and p["feature_size"] == 64 and p["base_channels"] == 64
    assert p["pooling_ratios"] == (2, 3, 4, 5)
    assert p["k_set"] == (2, 4, 8, 16) and p["subset_count"] == 3
    assert p["learning_rate"] == 1e-4 and p["weight_decay"] == 1e-3
    assert p["batch_size"] == 6 and p["epochs"] == 400


def test_toy_config_values():
    p = packaged_config("toy").estimator_params()
    assert p["backbone"] == "toy" and p["base_channels"] == 16
    assert p["k_set"] == (2, 4) and p["subset_count"] == 3 and p["epochs"] == 50


def test_empty_dict_gives_defaults():
    assert RunConfig.from_dict({}) == RunConfig()


@pytest.mark.parametrize("bad", [
    {"unknown": 1},
    {"train": {"learning_rate": -1}},
    {"masking": {"k_set": []}},
    {"backbone": {"architecture": "resnet"}},
    {"net": {"stage_blocks": [1, 2, 3]}},
    {"data": {"feature_size": 30}},
    {"masking": {"k_set": [3]}},
    {"loss": {"ssim_window": 10}},
    {"backbone": {"layers": [2, 1]}},
    {"data": {"feature_size": 16}, "loss": {"ssim_window": 7}, "masking": {"k_set": [2]}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_with_overrides():
    cfg = packaged_config("toy").with_overrides(masking={"subset_count": 9})
    assert cfg.masking.subset_count == 9
    assert cfg.masking.k_set == packaged_config("toy").masking.k_set
    with pytest.raises(ConfigError):
        cfg.with_overrides(masking={"k_set": [7]})


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml")


def test_inference_seed_and_resampling_reach_estimator():
    from mfrnet import MFRNet

    cfg = packaged_config("toy").with_overrides(inference={"seed": 5}, masking={"resampling": "epoch"})
    model = MFRNet(**cfg.estimator_params())
    assert model._inference_seed() == 5
    assert model.train_config().mask_resampling == "epoch"
    with pytest.raises(ConfigError):
        cfg.with_overrides(masking={"resampling": "never"})
