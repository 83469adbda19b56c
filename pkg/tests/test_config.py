import json

import pytest

from diffsep.config import Config, ConfigError, load_config


def test_defaults_match_the_documented_geometry():
    cfg = Config()
    assert cfg.audio.sample_rate == 16000 and cfg.audio.salience_rate == 22050
    assert (cfg.audio.stft_window, cfg.audio.stft_hop) == (512, 256)
    assert cfg.hcqt.bins_per_octave * cfg.hcqt.n_octaves == 360
    assert cfg.model.n_harmonics == 40 and cfg.model.n_noise_bands == 65
    assert cfg.train.batch_size == 15 and cfg.train.lr == 1e-4
    assert cfg.n_samples == 64000


def test_json_roundtrip():
    cfg = Config()
    cfg.train.lr = 3e-3
    again = Config.from_dict(json.loads(cfg.to_json()))
    assert again.to_dict() == cfg.to_dict()


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr": 0.01, "seed": 4}}))
    cfg = load_config(path, {"train": {"seed": 9}})
    assert cfg.train.lr == 0.01 and cfg.train.seed == 9


@pytest.mark.parametrize("bad", [
    {"nope": {}},
    {"train": {"nope": 1}},
    {"train": {"batch_size": 1.5}},
    {"train": {"batch_size": 0}},
    {"salience": {"source": "magic"}},
    {"loss": {"balancing": "whatever"}},
    {"data": {"splits": {"train": 0.5}}},
])
def test_invalid_settings_raise(bad):
    with pytest.raises(ConfigError):
        Config().update(bad)


def test_unreadable_file_is_a_config_error(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_set_dotted():
    cfg = Config()
    cfg.set("model.seed", 5)
    assert cfg.model.seed == 5
