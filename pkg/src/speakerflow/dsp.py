"""Signal-processing kernel: STFT/iSTFT, mel analysis, SNR mixing, SI-SDR.

Everything here is a pure function of its inputs. The numpy functions are
the reference path; ``torch_stft`` / ``torch_istft`` follow the identical
framing convention (periodic Hann, centre reflect padding) so differentiable
code can share spectrogram geometry with the numpy analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from scipy import signal as sps
from scipy.io import wavfile

from .config import FeatureConfig

SI_SDR_CAP_DB = 60.0


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 24000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono (1-D), got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """One-sided STFT, ``bins`` has shape (n_fft // 2 + 1, T)."""

    bins: np.ndarray
    n_fft: int
    hop: int
    window: str = "hann"

    def __post_init__(self):
        if self.bins.ndim != 2:
            raise ValueError("spectrogram bins must be a 2-D (F, T) array")
        if self.bins.shape[0] != self.n_fft // 2 + 1:
            raise ValueError(
                f"F={self.bins.shape[0]} inconsistent with n_fft={self.n_fft} "
                f"(expected {self.n_fft // 2 + 1})"
            )
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in (0, n_fft], got {self.hop}")

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Log-mel features, ``frames`` has shape (T, n_mels)."""

    frames: np.ndarray
    n_mels: int = 100
    hop: int = 256
    sample_rate: int = 24000

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.n_mels:
            raise ValueError(f"mel frames must have shape (T, {self.n_mels}), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("mel spectrogram contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hann_window(n_fft: int) -> np.ndarray:
    """Periodic Hann window (the COLA-friendly variant)."""
    n = np.arange(n_fft)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / n_fft)


def n_frames_for(n_samples: int, hop: int) -> int:
    """Frame count under centre padding: one frame per hop plus the final edge frame."""
    return 1 + n_samples // hop


def stft(w: Waveform, n_fft: int = 1024, hop: int = 256) -> ComplexSpectrogram:
    x = w.samples
    if len(x) < n_fft:
        raise ValueError(f"signal of {len(x)} samples is shorter than one frame (n_fft={n_fft})")
    if not 0 < hop <= n_fft:
        raise ValueError(f"hop must be in (0, n_fft], got {hop}")
    pad = n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop]
    spec = np.fft.rfft(frames * hann_window(n_fft), axis=-1)
    return ComplexSpectrogram(bins=spec.T, n_fft=n_fft, hop=hop)


def istft(s: ComplexSpectrogram, out_len: int) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`, trimmed/padded to ``out_len``."""
    n_fft, hop = s.n_fft, s.hop
    n_frames = s.n_frames
    window = hann_window(n_fft)
    frames = np.fft.irfft(s.bins.T, n=n_fft, axis=-1) * window
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window**2
    for j in range(n_frames):
        out[j * hop : j * hop + n_fft] += frames[j]
        norm[j * hop : j * hop + n_fft] += wsq
    nonzero = norm > 1e-11
    out[nonzero] /= norm[nonzero]
    pad = n_fft // 2
    out = out[pad : pad + out_len]
    if len(out) < out_len:
        out = np.pad(out, (0, out_len - len(out)))
    return Waveform(out)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, sample_rate: int) -> np.ndarray:
    """The n_mels + 2 band edge frequencies in Hz; band k is centred on entry k + 1."""
    mels = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(n_fft: int = 1024, n_mels: int = 100, sample_rate: int = 24000) -> np.ndarray:
    """Triangular HTK-mel filters (peak height 1), shape (n_mels, n_fft // 2 + 1)."""
    n_bins = n_fft // 2 + 1
    if n_mels >= n_bins:
        raise ValueError(f"n_mels={n_mels} must be smaller than the number of FFT bins ({n_bins})")
    return _filterbank_cached(n_fft, n_mels, sample_rate).copy()


@lru_cache(maxsize=16)
def _filterbank_cached(n_fft: int, n_mels: int, sample_rate: int) -> np.ndarray:
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    edges = mel_band_edges(n_mels, sample_rate)
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if len(empty):
        raise ValueError(f"mel bands {empty.tolist()} contain no FFT bin; increase n_fft or reduce n_mels")
    return fb


def log_mel(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"waveform rate {w.sample_rate} does not match feature rate {cfg.sample_rate}")
    spec = stft(w, cfg.n_fft, cfg.hop)
    fb = _filterbank_cached(cfg.n_fft, cfg.n_mels, cfg.sample_rate)
    mel = fb @ np.abs(spec.bins)
    frames = np.log(np.maximum(mel, cfg.log_floor)).T
    return MelSpectrogram(frames=frames, n_mels=cfg.n_mels, hop=cfg.hop, sample_rate=cfg.sample_rate)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def mix_at_snr(signal: Waveform, interference: Waveform, snr_db: float) -> tuple[Waveform, float]:
    """Add ``interference`` scaled so that P(signal) / P(scaled interference) hits ``snr_db``."""
    if len(signal) != len(interference):
        raise ValueError(f"length mismatch: {len(signal)} vs {len(interference)}")
    if signal.sample_rate != interference.sample_rate:
        raise ValueError("sample rate mismatch")
    p_sig, p_int = power(signal.samples), power(interference.samples)
    if p_int <= 0:
        raise ValueError("interference has zero power")
    if p_sig <= 0:
        raise ValueError("signal has zero power")
    scale = math.sqrt(p_sig / (p_int * 10.0 ** (snr_db / 10.0)))
    return Waveform(signal.samples + scale * interference.samples, signal.sample_rate), scale


def snr_db(signal: np.ndarray, interference: np.ndarray) -> float:
    return 10.0 * math.log10(power(signal) / power(interference))


def si_sdr(estimate: Waveform, reference: Waveform, cap_db: float = SI_SDR_CAP_DB) -> float:
    est = estimate.samples if isinstance(estimate, Waveform) else np.asarray(estimate, dtype=np.float64)
    ref = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0:
        raise ValueError("reference has zero power")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    err = float(np.sum(np.square(target - est)))
    sig = float(np.dot(target, target))
    if err <= 0 or sig / err >= 10.0 ** (cap_db / 10.0):
        return cap_db
    if sig <= 0:
        return -cap_db
    return 10.0 * math.log10(sig / err)


def si_sdr_torch(estimate: torch.Tensor, reference: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Differentiable SI-SDR over the last axis (uncapped; ``eps`` guards the division)."""
    ref_energy = (reference * reference).sum(-1, keepdim=True)
    alpha = (estimate * reference).sum(-1, keepdim=True) / (ref_energy + eps)
    target = alpha * reference
    err = target - estimate
    return 10.0 * torch.log10(((target * target).sum(-1) + eps) / ((err * err).sum(-1) + eps))


def torch_stft(x: torch.Tensor, n_fft: int = 1024, hop: int = 256) -> torch.Tensor:
    window = torch.hann_window(n_fft, periodic=True, dtype=x.dtype, device=x.device)
    return torch.stft(
        x, n_fft, hop_length=hop, window=window, center=True, pad_mode="reflect", return_complex=True
    )


def torch_istft(spec: torch.Tensor, n_fft: int, hop: int, length: int) -> torch.Tensor:
    real_dtype = spec.real.dtype
    window = torch.hann_window(n_fft, periodic=True, dtype=real_dtype, device=spec.device)
    return torch.istft(spec, n_fft, hop_length=hop, window=window, center=True, length=length)


def spectrogram_to_torch(s: ComplexSpectrogram, dtype=torch.float32) -> torch.Tensor:
    cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    return torch.from_numpy(np.ascontiguousarray(s.bins)).to(cdtype)


def resample(x: np.ndarray, orig_sr: int, target_sr: int) -> np.ndarray:
    if orig_sr == target_sr:
        return x
    ratio = Fraction(target_sr, orig_sr)
    return sps.resample_poly(x, ratio.numerator, ratio.denominator)


def read_wav(path: str | Path, target_sr: int = 24000) -> Waveform:
    """Load a mono PCM16 or float WAV, resampling to ``target_sr``."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(resample(x, rate, target_sr), target_sr)


def write_wav(path: str | Path, w: Waveform, fmt: str = "float32") -> None:
    if fmt == "float32":
        data = w.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    wavfile.write(path, w.sample_rate, data)
