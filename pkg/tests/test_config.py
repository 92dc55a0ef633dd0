import json

import pytest

from crateseg.config import ARCHITECTURES, ModelConfig, RunConfig, load_config_file
from crateseg.exceptions import ConfigurationError


def test_default_model_config():
    config = ModelConfig()
    assert config.grid_shape == (4, 4)
    assert config.num_patches == 16
    assert config.num_tokens == 17
    assert config.patch_dim == 192
    assert config.architecture == "crate"


def test_large_scale_patch_count():
    config = ModelConfig(image_shape=(3, 224, 224), patch_shape=(8, 8))
    assert config.num_patches == 784
    assert config.patch_dim == 192


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_for_architecture(arch):
    config = ModelConfig.for_architecture(arch)
    assert config.architecture == arch


def test_vit_selects_mhsa_and_mlp():
    config = ModelConfig.for_architecture("vit")
    assert config.attention_variant == "MHSA"
    assert config.mlp_variant == "MLP"


@pytest.mark.parametrize("overrides", [
    {"num_heads": 3},
    {"patch_shape": (5, 5)},
    {"num_layers": -1},
    {"epsilon": 0.0},
    {"attention_variant": "linear"},
    {"subspace_init": "zeros"},
    {"pixel_std": 0.0},
])
def test_invalid_model_config(overrides):
    with pytest.raises(ConfigurationError):
        ModelConfig(**overrides)


def test_unknown_architecture():
    with pytest.raises(ConfigurationError):
        ModelConfig.for_architecture("resnet")


def test_model_config_dict():
    config = ModelConfig(num_layers=0, image_shape=[1, 16, 16], patch_shape=[4, 4])
    data = config.to_dict()
    assert data["image_shape"] == [1, 16, 16]
    assert json.loads(json.dumps(data)) == data
    restored = ModelConfig.from_dict(data)
    assert restored == config
    assert restored.image_shape == (1, 16, 16)
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({**data, "dropout": 0.1})


def test_load_config_file(tmp_path):
    toml_path = tmp_path / "run.toml"
    toml_path.write_text('epochs = 3\nweight-decay = 0.5\narch = "vit"\n')
    assert load_config_file(toml_path) == {"epochs": 3, "weight_decay": 0.5, "arch": "vit"}
    json_path = tmp_path / "run.json"
    json_path.write_text('{"lr": 0.001}')
    assert load_config_file(json_path) == {"lr": 0.001}
    yaml_path = tmp_path / "run.yaml"
    yaml_path.write_text("lr: 1")
    with pytest.raises(ConfigurationError):
        load_config_file(yaml_path)
    with pytest.raises(ConfigurationError):
        load_config_file(tmp_path / "missing.toml")


def test_run_config_precedence(tmp_path):
    config_file = tmp_path / "train.json"
    config_file.write_text(json.dumps({"epochs": 5, "lr": 0.01}))
    defaults = {"epochs": 20, "lr": 1e-4, "seed": 0, "out": "runs", "config": None}
    run = RunConfig.resolve("train", defaults, {"lr": 0.5}, config_file)
    assert run["epochs"] == 5
    assert run["lr"] == 0.5
    assert run.get("seed") == 0
    echoed = run.to_dict()
    assert echoed["command"] == "train"
    assert "out" not in echoed["values"]
    assert "config" not in echoed["values"]


def test_run_config_rejects_unknown_keys(tmp_path):
    config_file = tmp_path / "train.json"
    config_file.write_text(json.dumps({"momentum": 0.5}))
    with pytest.raises(ConfigurationError):
        RunConfig.resolve("train", {"epochs": 20}, {}, config_file)


def test_run_config_write(tmp_path):
    run = RunConfig("rates", {"layer": "all", "trials": 10, "out": tmp_path})
    path = run.write(tmp_path)
    assert path == tmp_path / "reports" / "config.json"
    data = json.loads(path.read_text())
    assert data == {"command": "rates", "values": {"layer": "all", "trials": 10}}
    assert RunConfig.from_dict(data).values == {"layer": "all", "trials": 10}
