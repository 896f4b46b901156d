"""Target speaker extraction with conditional flow matching on mel spectrograms."""

from .config import Config, FeatureConfig, ModelConfig, SamplerConfig, TrainConfig, load_config
from .dsp import Waveform, istft, log_mel, si_sdr, stft
from .model import VelocityField
from .sampler import extract
from .vocoder import PhaseVocoder, vocode

__version__ = "0.1.0"

__all__ = [
    "Config",
    "FeatureConfig",
    "ModelConfig",
    "PhaseVocoder",
    "SamplerConfig",
    "TrainConfig",
    "VelocityField",
    "Waveform",
    "extract",
    "istft",
    "load_config",
    "log_mel",
    "si_sdr",
    "stft",
    "vocode",
]
