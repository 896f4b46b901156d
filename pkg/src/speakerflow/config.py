"""Typed configuration sections and INI-file loading.

One config file drives every command. Sections map one-to-one onto the
dataclasses below; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 24000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 100
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.hop <= 0 or self.hop > self.n_fft:
            raise ValueError(f"hop must be in (0, n_fft], got hop={self.hop} n_fft={self.n_fft}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def hash(self) -> str:
        return config_hash(self)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    embed_dim: int = 128
    ff_dim: int = 256
    mel_dim: int = 100
    cond_drop_prob: float = 0.2

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) must be divisible by n_heads ({self.n_heads})"
            )
        if (self.embed_dim // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls(n_layers=22, n_heads=16, embed_dim=1024, ff_dim=2048)


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1e-4
    warmup_frac: float = 0.1
    epochs: int = 100
    max_steps: int | None = None
    batch_frames: int = 11000
    cond_drop_prob: float = 0.2
    enroll_loss_weight: float = 0.0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    ckpt_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ValueError("cond_drop_prob must be a probability")


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 32
    method: str = "midpoint"
    cfg_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.method not in ("euler", "midpoint"):
            raise ValueError(f"unknown solver {self.method!r}")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


@dataclass(frozen=True)
class VocoderConfig:
    n_blocks: int = 4
    channels: int = 128
    cross_attn_every: int = 1
    n_heads: int = 4
    kernel_size: int = 7
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 100


@dataclass(frozen=True)
class VocoderTrainConfig:
    lr_peak: float = 1e-3
    warmup_frac: float = 0.05
    steps: int = 1000
    batch_size: int = 4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    ckpt_every: int = 500
    seed: int = 0


@dataclass(frozen=True)
class MixConfig:
    snr_low: float = -5.0
    snr_high: float = 5.0
    noise_prob: float = 0.75
    noise_snr_low: float = -5.0
    noise_snr_high: float = 5.0
    enroll_min_s: float = 1.0
    enroll_max_s: float = 5.0
    peak_limit: float = 0.9

    def __post_init__(self):
        if self.snr_low > self.snr_high or self.noise_snr_low > self.noise_snr_high:
            raise ValueError("SNR ranges must satisfy low <= high")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ValueError("noise_prob must be a probability")
        if not 0 < self.enroll_min_s <= self.enroll_max_s:
            raise ValueError("enrollment duration range is invalid")


@dataclass(frozen=True)
class ToyCorpusConfig:
    min_duration_s: float = 1.2
    max_duration_s: float = 2.0
    f0_low: float = 110.0
    f0_high: float = 260.0
    n_harmonics: int = 24


@dataclass(frozen=True)
class Config:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    vocoder_train: VocoderTrainConfig = field(default_factory=VocoderTrainConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    toy: ToyCorpusConfig = field(default_factory=ToyCorpusConfig)


_SECTIONS = {f.name: f for f in dataclasses.fields(Config)}


def config_hash(obj: Any) -> str:
    """Stable short digest of a dataclass (or plain dict) for provenance."""
    payload = dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else obj
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(raw: str, annotation: str) -> Any:
    raw = raw.strip()
    if "None" in annotation and raw.lower() in ("", "none"):
        return None
    if annotation.startswith("int"):
        return int(raw)
    if annotation.startswith("float"):
        return float(raw)
    if annotation.startswith("bool"):
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


def _build_section(cls, values: dict[str, str]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"unknown keys for [{cls.__name__}]: {sorted(unknown)}")
    kwargs = {k: _coerce(v, str(known[k].type)) for k, v in values.items()}
    return cls(**kwargs)


def load_config(path: str | Path | None = None) -> Config:
    """Read an INI config; missing sections and keys fall back to defaults."""
    if path is None:
        return Config()
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    sections = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ValueError(f"unknown config section [{name}]")
        cls = _SECTIONS[name].default_factory
        sections[name] = _build_section(cls, dict(parser[name]))
    return Config(**sections)


def dump_config(cfg: Config, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    for name in _SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {k: "none" if v is None else str(v) for k, v in dataclasses.asdict(section).items()}
    with open(path, "w") as fh:
        parser.write(fh)

