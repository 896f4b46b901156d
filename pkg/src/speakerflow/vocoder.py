"""Mel-to-waveform vocoder that borrows phase from the mixture's complex STFT.

The backbone is a stack of ConvNeXt blocks over mel frames, each followed by
cross-attention whose keys/values are per-frame features of the mixed STFT
(log-magnitude plus unit-circle phase). The head predicts a spectrum s_p
(magnitude and phase) together with per-bin complex coefficients alpha, beta,
and synthesises

    s_out = alpha * s_m + beta * s_p

before the inverse STFT. At initialisation alpha = 1 and beta = 0, so the
untrained model returns the mixture unchanged.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .cfm import lr_at
from .config import FeatureConfig, VocoderConfig, VocoderTrainConfig
from .dsp import (
    ComplexSpectrogram,
    MelSpectrogram,
    Waveform,
    log_mel,
    read_wav,
    si_sdr_torch,
    spectrogram_to_torch,
    stft,
    torch_istft,
)
from .mixing import read_manifest

log = logging.getLogger(__name__)

MAG_FLOOR = 1e-5


@dataclass
class PhaseHeadOutput:
    alpha: torch.Tensor
    beta: torch.Tensor
    s_p: torch.Tensor
    s_out: torch.Tensor


def stft_features(spec: torch.Tensor, floor: float = MAG_FLOOR) -> torch.Tensor:
    """Raw per-frame features of a complex (..., F, T) STFT, shape (..., T, 3F).

    Layout per frame: [log max(|s|, floor) | cos(phase) | sin(phase)].
    """
    mag = spec.abs()
    phase = torch.angle(spec)
    feats = torch.cat([torch.log(mag.clamp_min(floor)), torch.cos(phase), torch.sin(phase)], dim=-2)
    return feats.transpose(-1, -2)


class StftEncoder(nn.Module):
    def __init__(self, n_bins: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(3 * n_bins, channels)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        return self.proj(stft_features(spec))


def stft_feature_encode(s_m: ComplexSpectrogram, encoder: StftEncoder) -> np.ndarray:
    dtype = encoder.proj.weight.dtype
    with torch.no_grad():
        return encoder(spectrogram_to_torch(s_m, dtype)).numpy()


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int, kernel_size: int, layer_scale: float):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pw1 = nn.Linear(dim, 3 * dim)
        self.act = nn.GELU()
        self.pw2 = nn.Linear(3 * dim, dim)
        self.gamma = nn.Parameter(torch.full((dim,), layer_scale))

    def forward(self, x):  # x: (B, C, T)
        h = self.dwconv(x).transpose(1, 2)
        h = self.pw2(self.act(self.pw1(self.norm(h))))
        return x + (self.gamma * h).transpose(1, 2)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)

    def forward(self, x, memory):  # x: (B, C, T), memory: (B, T, C)
        q = self.norm(x.transpose(1, 2))
        out, _ = self.attn(q, memory, memory, need_weights=False)
        return x + out.transpose(1, 2)


class PhaseVocoder(nn.Module):
    def __init__(self, cfg: VocoderConfig = VocoderConfig(), seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.n_bins = cfg.n_fft // 2 + 1
        if seed is None:
            self._build()
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                self._build()

    def _build(self):
        cfg, c = self.cfg, self.cfg.channels
        self.embed = nn.Conv1d(cfg.n_mels, c, kernel_size=7, padding=3)
        self.embed_norm = nn.LayerNorm(c, eps=1e-6)
        self.stft_encoder = StftEncoder(self.n_bins, c)
        self.blocks = nn.ModuleList([ConvNeXtBlock(c, cfg.kernel_size, 1.0 / cfg.n_blocks) for _ in range(cfg.n_blocks)])
        self.cross = nn.ModuleDict(
            {
                str(i): CrossAttention(c, cfg.n_heads)
                for i in range(cfg.n_blocks)
                if cfg.cross_attn_every and (i + 1) % cfg.cross_attn_every == 0
            }
        )
        self.final_norm = nn.LayerNorm(c, eps=1e-6)
        # per bin: log-magnitude, cos, sin, Re/Im alpha, Re/Im beta
        self.head = nn.Linear(c, 7 * self.n_bins)
        self.reset_head()

    def reset_head(self):
        f = self.n_bins
        with torch.no_grad():
            self.head.weight[3 * f :].zero_()
            self.head.bias[3 * f :].zero_()
            self.head.bias[3 * f : 4 * f].fill_(1.0)

    def forward(
        self,
        mel: torch.Tensor,
        s_m: torch.Tensor,
        length: int,
        alpha_override: torch.Tensor | complex | None = None,
        beta_override: torch.Tensor | complex | None = None,
    ) -> tuple[torch.Tensor, PhaseHeadOutput]:
        """
        Args:
            mel: clean-speech log-mel, (B, T, n_mels).
            s_m: mixed complex STFT, (B, F, T).
            length: output waveform length in samples.
            alpha_override, beta_override: replace the learned coefficients.

        Returns:
            Waveform (B, length) and the head tensors.
        """
        if mel.shape[1] != s_m.shape[-1]:
            raise ValueError(f"frame misalignment: mel has {mel.shape[1]} frames, mixed STFT has {s_m.shape[-1]}")
        if s_m.shape[-2] != self.n_bins:
            raise ValueError(f"mixed STFT has {s_m.shape[-2]} bins, expected {self.n_bins}")
        memory = self.stft_encoder(s_m)
        x = self.embed(mel.transpose(1, 2))
        x = self.embed_norm(x.transpose(1, 2)).transpose(1, 2)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if str(i) in self.cross:
                x = self.cross[str(i)](x, memory)
        h = self.head(self.final_norm(x.transpose(1, 2))).transpose(1, 2)  # (B, 7F, T)
        log_mag, cos, sin, a_re, a_im, b_re, b_im = h.chunk(7, dim=1)
        mag = torch.exp(log_mag.clamp(max=5.0))
        norm = torch.sqrt(cos**2 + sin**2 + 1e-9)
        s_p = torch.complex(mag * cos / norm, mag * sin / norm)
        alpha = torch.complex(a_re, a_im)
        beta = torch.complex(b_re, b_im)
        if alpha_override is not None:
            alpha = torch.as_tensor(alpha_override, dtype=s_p.dtype).expand_as(s_p)
        if beta_override is not None:
            beta = torch.as_tensor(beta_override, dtype=s_p.dtype).expand_as(s_p)
        s_out = alpha * s_m + beta * s_p
        wav = torch_istft(s_out, self.cfg.n_fft, self.cfg.hop, length)
        return wav, PhaseHeadOutput(alpha=alpha, beta=beta, s_p=s_p, s_out=s_out)


def vocode(
    mel: MelSpectrogram,
    s_m: ComplexSpectrogram,
    model: PhaseVocoder,
    out_len: int | None = None,
    alpha_override=None,
    beta_override=None,
) -> tuple[Waveform, PhaseHeadOutput]:
    """Single-utterance inference; ``out_len`` defaults to the STFT's nominal span."""
    if mel.n_frames != s_m.n_frames:
        raise ValueError(f"frame misalignment: mel has {mel.n_frames} frames, mixed STFT has {s_m.n_frames}")
    if (s_m.n_fft, s_m.hop) != (model.cfg.n_fft, model.cfg.hop):
        raise ValueError("mixed STFT geometry does not match the vocoder config")
    if out_len is None:
        out_len = (s_m.n_frames - 1) * s_m.hop
    dtype = model.head.weight.dtype
    model.eval()
    with torch.no_grad():
        wav, head = model(
            torch.as_tensor(mel.frames, dtype=dtype)[None],
            spectrogram_to_torch(s_m, dtype)[None],
            out_len,
            alpha_override,
            beta_override,
        )
    head = PhaseHeadOutput(*(t[0] for t in (head.alpha, head.beta, head.s_p, head.s_out)))
    return Waveform(wav[0].double().numpy(), mel.sample_rate), head


def si_sdr_loss(estimate: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    return -si_sdr_torch(estimate, reference).mean()


@dataclass
class VocoderItem:
    example_id: str
    clean_mel: np.ndarray
    mixed_stft: np.ndarray
    clean: np.ndarray


def load_vocoder_items(manifest: str | Path, features: FeatureConfig = FeatureConfig()) -> list[VocoderItem]:
    manifest = Path(manifest)
    items = []
    for row in read_manifest(manifest):
        clean = read_wav(manifest.parent / row["target"], features.sample_rate)
        mixed = read_wav(manifest.parent / row["mixed"], features.sample_rate)
        items.append(
            VocoderItem(
                row["id"],
                log_mel(clean, features).frames,
                stft(mixed, features.n_fft, features.hop).bins,
                clean.samples,
            )
        )
    return items


def _tensors(item: VocoderItem, dtype):
    return (
        torch.as_tensor(item.clean_mel, dtype=dtype)[None],
        torch.from_numpy(item.mixed_stft).to(torch.complex64 if dtype == torch.float32 else torch.complex128)[None],
        torch.as_tensor(item.clean, dtype=dtype)[None],
    )


class VocoderDiverged(RuntimeError):
    pass


def train_vocoder(
    manifest: str | Path | list[VocoderItem],
    model: PhaseVocoder,
    cfg: VocoderTrainConfig = VocoderTrainConfig(),
    out_dir: str | Path | None = None,
    features: FeatureConfig = FeatureConfig(),
) -> list[float]:
    """Minimise -SI-SDR(vocode(mel(clean), stft(mixed)), clean); returns per-step losses."""
    torch.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    items = manifest if isinstance(manifest, list) else load_vocoder_items(manifest, features)
    if not items:
        raise ValueError("vocoder manifest is empty")
    dtype = model.head.weight.dtype
    tensors = [_tensors(it, dtype) for it in items]
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_peak, weight_decay=cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "vocoder_loss.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
    losses = []
    queue: list[int] = []
    model.train()
    try:
        for step in range(1, cfg.steps + 1):
            batch = []
            while len(batch) < min(cfg.batch_size, len(items)):
                if not queue:
                    queue = order_rng.permutation(len(items)).tolist()
                batch.append(queue.pop(0))
            lr = lr_at(step, cfg.steps, cfg.lr_peak, cfg.warmup_frac)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            total = 0.0
            for i in batch:
                mel, s_m, clean = tensors[i]
                wav, _ = model(mel, s_m, clean.shape[-1])
                loss = si_sdr_loss(wav, clean) / len(batch)
                if not torch.isfinite(loss):
                    ids = [items[j].example_id for j in batch]
                    raise VocoderDiverged(f"non-finite vocoder loss at step {step} (examples {ids})")
                loss.backward()
                total += loss.item()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            losses.append(total)
            if writer is not None:
                writer.writerow([step, f"{total:.8g}", f"{lr:.8g}"])
            if out is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                save_checkpoint(out / f"vocoder_{step:07d}.pt", "vocoder", model, model.cfg, features, step)
            if step % 100 == 0:
                log.info("vocoder step %d loss %.3f", step, total)
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        save_checkpoint(out / "vocoder_final.pt", "vocoder", model, model.cfg, features, cfg.steps)
        (out / "vocoder_train_config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True))
    model.eval()
    return losses


def evaluate_items(model: PhaseVocoder, items: list[VocoderItem]) -> list[float]:
    """SI-SDR (dB, numpy reference metric) of the vocoder output against the clean target."""
    from .dsp import si_sdr

    dtype = model.head.weight.dtype
    scores = []
    model.eval()
    with torch.no_grad():
        for it in items:
            mel, s_m, clean = _tensors(it, dtype)
            wav, _ = model(mel, s_m, clean.shape[-1])
            scores.append(si_sdr(Waveform(wav[0].double().numpy()), Waveform(it.clean)))
    return scores


def load_vocoder(path: str | Path, features: FeatureConfig | None = None) -> tuple[PhaseVocoder, FeatureConfig]:
    payload = load_checkpoint(path, "vocoder", features)
    model = PhaseVocoder(VocoderConfig(**payload["model_config"]))
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload["features"]
