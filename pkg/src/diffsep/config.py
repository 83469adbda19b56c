"""Configuration: built-in defaults < JSON config file < command-line flags.

Sections mirror the modules.  Unknown keys anywhere raise ``ConfigError``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class AudioConfig:
    sample_rate: int = 16000
    salience_rate: int = 22050
    excerpt_seconds: float = 4.0
    stft_window: int = 512
    stft_hop: int = 256


@dataclass
class HcqtConfig:
    fmin: float = 32.7
    bins_per_octave: int = 60
    n_octaves: int = 6
    hop: int = 256
    harmonics: list = field(default_factory=lambda: [1])
    log_compress: bool = True


@dataclass
class SalienceConfig:
    source: str = "oracle"  # oracle | net
    threshold: float = 0.3
    oracle_sigma: float = 1.0


@dataclass
class ModelConfig:
    voices: list = field(default_factory=lambda: ["soprano", "alto", "tenor", "bass"])
    n_harmonics: int = 40
    n_noise_bands: int = 65
    latent_dim: int = 64
    decoder_hidden: int = 64
    salience_channels: int = 16
    salience_kernel: int = 5
    salience_layers: int = 3
    assignment_channels: int = 8
    assignment_kernel: int = 3
    mask_power: float = 2.0
    mask_eps: float = 1e-8
    f0_scale: float = 1000.0
    noise_bias: float = -5.0
    dtype: str = "float32"
    seed: int = 0


@dataclass
class LossConfig:
    scales: list = field(default_factory=lambda: [2048, 1024, 512, 256, 128, 64])
    balancing: str = "auto_calibrated"
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0


@dataclass
class TrainConfig:
    strategy: str = "wup"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 15
    max_epochs: int = 200
    patience: int = 30
    wup_epochs: list = field(default_factory=lambda: [50, 50])
    sfsft_epochs: int = 100
    clip_norm: float = 5.0
    nan_budget: int = 10
    seed: int = 0


@dataclass
class DataConfig:
    seed: int = 0
    # generation ranges (Hz) sit inside the voice ranges used by the range loss
    ranges: dict = field(default_factory=lambda: {
        "soprano": [440.0, 698.0], "alto": [262.0, 392.0],
        "tenor": [165.0, 247.0], "bass": [98.0, 147.0]})
    note_seconds: list = field(default_factory=lambda: [0.4, 1.2])
    glide_seconds: float = 0.05
    vibrato_prob: float = 0.5
    vibrato_rate: list = field(default_factory=lambda: [5.0, 7.0])
    vibrato_cents: float = 20.0
    rest_prob: float = 0.1
    rolloff: list = field(default_factory=lambda: [1.0, 2.0])
    n_harmonics: int = 30
    gain: list = field(default_factory=lambda: [0.5, 1.0])
    amplitude: float = 0.2
    noise_level: float = 0.002
    splits: dict = field(default_factory=lambda: {"train": 0.5, "valid": 0.25, "test": 0.25})


@dataclass
class Config:
    audio: AudioConfig = field(default_factory=AudioConfig)
    hcqt: HcqtConfig = field(default_factory=HcqtConfig)
    salience: SalienceConfig = field(default_factory=SalienceConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def n_samples(self):
        return int(round(self.audio.excerpt_seconds * self.audio.sample_rate))

    @property
    def n_sources(self):
        return len(self.model.voices)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        cfg = cls()
        cfg.update(data)
        return cfg

    def update(self, data):
        """Overlay a nested dict; unknown sections or keys raise."""
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(self)}
        for section, values in data.items():
            if section not in names:
                raise ConfigError(f"unknown config section {section!r}")
            target = getattr(self, section)
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object")
            keys = {f.name: f for f in dataclasses.fields(target)}
            for key, value in values.items():
                if key not in keys:
                    raise ConfigError(f"unknown config key {section}.{key}")
                setattr(target, key, _coerce(getattr(target, key), value, f"{section}.{key}"))
        self.validate()
        return self

    def set(self, dotted, value):
        section, key = dotted.split(".", 1)
        self.update({section: {key: value}})

    def validate(self):
        if self.salience.source not in ("oracle", "net"):
            raise ConfigError(f"salience.source must be oracle or net, not {self.salience.source!r}")
        if not 0 < self.salience.threshold < 1:
            raise ConfigError("salience.threshold must lie in (0, 1)")
        if self.loss.balancing not in ("fixed", "auto_calibrated"):
            raise ConfigError(f"unknown loss.balancing {self.loss.balancing!r}")
        if self.train.batch_size < 1 or self.train.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError("model.dtype must be float32 or float64")
        if abs(sum(self.data.splits.values()) - 1.0) > 1e-9:
            raise ConfigError("data.splits fractions must sum to 1")
        unknown = set(self.data.ranges) - set(self.model.voices)
        missing = set(self.model.voices) - set(self.data.ranges)
        if unknown or missing:
            raise ConfigError(f"data.ranges voices {sorted(self.data.ranges)} do not match model.voices")


def _coerce(current, value, name):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} expects a boolean")
        return value
    if isinstance(current, (int, float)) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if isinstance(current, int) and not isinstance(current, bool) and not float(value).is_integer():
            raise ConfigError(f"{name} expects an integer")
        return type(current)(value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    if isinstance(current, list) and isinstance(value, list):
        return list(value)
    if isinstance(current, dict) and isinstance(value, dict):
        return dict(value)
    raise ConfigError(f"{name}: cannot use {value!r} for a {type(current).__name__} setting")


def load_config(path=None, overrides=None):
    cfg = Config()
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg.update(data)
    if overrides:
        cfg.update(overrides)
    return cfg
