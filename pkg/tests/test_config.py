import sys
import os
import json
from pathlib import Path

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))
import pytest
import config
from utils.errors import ValidationError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_parse_override_reads_json_values():
    assert config.parse_override("optimizer.lr=0.01") == (["optimizer", "lr"], 0.01)
    assert config.parse_override("data.corpus=images/train") == (["data", "corpus"], "images/train")
    assert config.parse_override("sampler.sequential_minibatches=true")[1] is True
    with pytest.raises(ValidationError):
        config.parse_override("epochs")
    with pytest.raises(ValidationError):
        config.parse_override("optimizer..lr=1")


def test_apply_overrides_leaves_input_untouched():
    document = {"epochs": 5, "optimizer": {"lr": 0.1}}
    result = config.apply_overrides(document, ["epochs=0", "optimizer.lr=0.5", "data.pairs=10"])
    assert result == {"epochs": 0, "optimizer": {"lr": 0.5}, "data": {"pairs": 10}}
    assert document == {"epochs": 5, "optimizer": {"lr": 0.1}}
    with pytest.raises(ValidationError):
        config.apply_overrides(document, ["epochs.value=1"])


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIG_DIR.glob("*.json")))
def test_shipped_configs_validate(name):
    document = json.loads((CONFIG_DIR / name).read_text())
    assert config.validate_recipe_config(document) == []


def test_validate_recipe_config_problems():
    document = json.loads((CONFIG_DIR / "two_pixel_ood.json").read_text())
    assert any("unknown config keys" in p for p in config.validate_recipe_config({**document, "colour": 1}))
    assert any("wrong type" in p for p in config.validate_recipe_config({**document, "epochs": "5"}))
    assert any("wrong type" in p for p in config.validate_recipe_config({**document, "seed": True}))
    assert any("unknown optimizer keys" in p
               for p in config.validate_recipe_config({**document, "optimizer": {"momentum": 0.9}}))
    missing = {key: value for key, value in document.items() if key != "loss"}
    assert any("'loss'" in p for p in config.validate_recipe_config(missing))
    assert config.validate_recipe_config([]) != []


def test_load_recipe_config_with_overrides():
    cfg = config.load_recipe_config(CONFIG_DIR / "two_pixel_ood.json", ["epochs=0", "optimizer.lr=0.01"])
    assert cfg.epochs == 0
    assert cfg.optimizer["lr"] == 0.01
    assert cfg.optimizer["beta2"] == 0.999
    assert cfg.data["batch_size"] == 10000


def test_load_recipe_config_errors(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    with pytest.raises(ValidationError):
        config.load_recipe_config(path)
    with pytest.raises(ValidationError):
        config.load_recipe_config(CONFIG_DIR / "two_pixel_ood.json", ["n_models=3"])


def test_thread_count(monkeypatch):
    monkeypatch.setenv("IPU_THREADS", "3")
    assert config.get_thread_count() == 3
    assert config.get_thread_count(5) == 5
    monkeypatch.delenv("IPU_THREADS")
    assert config.get_thread_count() >= 1
    with pytest.raises(ValidationError):
        config.get_thread_count(0)
    monkeypatch.setenv("IPU_THREADS", "many")
    with pytest.raises(ValidationError):
        config.get_thread_count()


def test_log_level(monkeypatch):
    monkeypatch.delenv("IPU_LOG_LEVEL", raising=False)
    assert config.get_log_level() == "INFO"
    monkeypatch.setenv("IPU_LOG_LEVEL", "debug")
    assert config.get_log_level() == "DEBUG"
    assert config.get_log_level("warning") == "WARNING"
    with pytest.raises(ValidationError):
        config.get_log_level("loud")
