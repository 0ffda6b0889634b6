import json

import pytest

from config import Config, load_pipeline_config
from generate_env import DEFAULTS, generate_env_content, generate_seed, write_env_file
from utils.errors import ConfigError
from utils.pipeline import PipelineConfig


def _write(tmp_path, payload):
    path = tmp_path / "cfg.json"
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload))
    return str(path)


def test_no_file_gives_defaults():
    assert load_pipeline_config(None) == PipelineConfig()


def test_sections_override_field_by_field(tmp_path):
    cfg = load_pipeline_config(_write(tmp_path, {
        "train": {"epochs": 2, "batch_size": 8},
        "threshold": {"mode": "simple", "phi": 0.4},
        "model": {"gru_hidden": 4, "block_channels": [2, 2, 2]},
    }))
    assert cfg.train.epochs == 2
    assert cfg.train.batch_size == 8
    assert cfg.train.lr0 == PipelineConfig().train.lr0
    assert cfg.threshold.apply([0.45, 0.3]).tolist() == [1, 0]
    assert cfg.model == {"gru_hidden": 4, "block_channels": [2, 2, 2]}
    assert cfg.dsp == PipelineConfig().dsp


@pytest.mark.parametrize("payload", [
    {"optimizer": {}},
    {"train": {"momentum": 0.9}},
    {"train": []},
    {"model": {"labels": ["Speech"]}},
    {"model": {"num_outputs": 3}},
    {"model": {"block_channels": [2, 2]}},
    {"threshold": {"phi_low": 0.9}},
    "[1, 2]",
    "{not json",
])
def test_invalid_configs(tmp_path, payload):
    with pytest.raises(ConfigError):
        load_pipeline_config(_write(tmp_path, payload))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_pipeline_config(str(tmp_path / "nope.json"))


def test_init_app_rejects_unknown_level(monkeypatch, tmp_path):
    monkeypatch.setattr(Config, "WORK_DIR", str(tmp_path / "work"))
    with pytest.raises(ConfigError):
        Config.init_app("chatty")
    Config.init_app("debug")
    assert (tmp_path / "work").is_dir()


def test_env_content_lists_every_setting():
    text = generate_env_content(VAD_SEED=42)
    assert "VAD_SEED=42" in text
    for key in DEFAULTS:
        assert f"{key}=" in text
    with pytest.raises(KeyError):
        generate_env_content(VAD_COLOUR="blue")


def test_env_file_is_not_overwritten(tmp_path):
    path = str(tmp_path / ".env")
    write_env_file(path, VAD_THREADS=4)
    assert "VAD_THREADS=4" in open(path).read()
    with pytest.raises(FileExistsError):
        write_env_file(path)
    write_env_file(path, force=True, VAD_THREADS=2)
    assert "VAD_THREADS=2" in open(path).read()


def test_generated_seed_range():
    assert all(0 <= generate_seed() < 2 ** 31 - 1 for _ in range(20))
