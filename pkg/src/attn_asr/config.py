"""Run configuration and seeded random streams."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

import numpy as np

from .model import DecoderConfig, EncoderConfig, ModelConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class RunConfig:
    """Every knob of a run; defaults follow the full-size recipe."""

    seed: int = 0
    # encoder / decoder dimensions
    conv_maps: int = 128
    residual_blocks: int = 3
    residual_maps: int = 64
    dense_units: int = 1024
    lstm_layers: int = 3
    lstm_units: int = 256
    decoder_units: int = 256
    attention_units: int = 256
    # optimisation
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    dropout: float = 0.5
    fine_tune_lr: float = 1e-4
    weight_decay: float = 1e-5
    patience: int = 5
    max_epochs: int = 100
    max_steps: int = 0  # 0 = unlimited
    time_limit: float = 0.0  # seconds; 0 = unlimited
    target_error: float = 0.0  # stop once dev error drops below this; 0 = never
    # decoding
    beam_width: int = 10
    dev_beam_width: int = 10
    # paths
    manifest: str = ""
    vocab: str = ""
    norm_stats: str = ""
    phone_map: str = ""
    out: str = "run"

    @property
    def keep_prob(self) -> float:
        return 1.0 - self.dropout

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            EncoderConfig(
                conv_maps=self.conv_maps,
                residual_blocks=self.residual_blocks,
                residual_maps=self.residual_maps,
                dense_units=self.dense_units,
                lstm_layers=self.lstm_layers,
                lstm_units=self.lstm_units,
            ),
            DecoderConfig(lstm_units=self.decoder_units, attention_units=self.attention_units, vocab_size=vocab_size),
        )

    def validate(self) -> "RunConfig":
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)):
                continue
            if f.name not in _NON_NEGATIVE and v <= 0:
                raise ConfigError(f"{f.name} must be positive, got {v}", f.name)
            if f.name in _NON_NEGATIVE and v < 0:
                raise ConfigError(f"{f.name} must be non-negative, got {v}", f.name)
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}", "dropout")
        return self

    def with_overrides(self, **kw) -> "RunConfig":
        for k in kw:
            if k not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {k!r}", k)
        return dataclasses.replace(self, **kw).validate()

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_FIELD_TYPES = get_type_hints(RunConfig)
_NON_NEGATIVE = {"seed", "dropout", "weight_decay", "patience", "max_steps", "time_limit", "target_error"}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat ``key = value`` lines; '#' starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}", key)
        typ = _FIELD_TYPES[key]
        try:
            values[key] = typ(value) if typ is not str else value
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} expects {typ.__name__}, got {value!r}", key) from None
    return dataclasses.replace(base or RunConfig(), **values).validate()


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), base)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (init, dropout, shuffle, synth, ...)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
