"""Velocity-field transformer over concatenated [enrollment | mixed] mel frames.

Each time position carries the noisy flow state and the conditioning mel,
concatenated channel-wise and projected to the model width. Blocks are
pre-norm transformer layers whose norms are modulated by the flow time
(adaLN-Zero). Attention is asymmetric: enrollment queries only see enrollment
keys, mixed queries see everything. No layer mixes information across time
except that masked attention, so the enrollment outputs depend only on the
enrollment inputs and t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig


@dataclass(frozen=True, eq=False)
class ConditioningInput:
    enrollment_mel: np.ndarray
    mixed_mel: np.ndarray
    dropped: bool = False

    def __post_init__(self):
        e, m = np.asarray(self.enrollment_mel), np.asarray(self.mixed_mel)
        if e.ndim != 2 or m.ndim != 2:
            raise ValueError("conditioning mels must be (T, d) matrices")
        if e.shape[1] != m.shape[1]:
            raise ValueError(f"mel dims differ: enrollment {e.shape[1]} vs mixed {m.shape[1]}")
        if e.shape[0] < 1 or m.shape[0] < 1:
            raise ValueError("enrollment and mixed parts need at least one frame")

    @property
    def t_e(self) -> int:
        return self.enrollment_mel.shape[0]

    @property
    def t_m(self) -> int:
        return self.mixed_mel.shape[0]

    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.enrollment_mel, self.mixed_mel], axis=0)


@dataclass(frozen=True, eq=False)
class FlowState:
    values: np.ndarray
    time: float

    def __post_init__(self):
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"flow time must lie in [0, 1], got {self.time}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("flow state contains non-finite values")


def build_attention_mask(t_e: int, t_m: int) -> torch.Tensor:
    """Boolean (query, key) mask; True means the query may attend to the key."""
    if t_e < 1 or t_m < 1:
        raise ValueError("t_e and t_m must be >= 1")
    n = t_e + t_m
    is_enroll = torch.arange(n) < t_e
    return is_enroll[None, :] | ~is_enroll[:, None]


def batch_attention_mask(t_e: torch.Tensor, lengths: torch.Tensor, n: int) -> torch.Tensor:
    """Per-example masks for a padded batch, shape (B, n, n).

    Padding keys are never attended; padding queries attend to all valid keys
    (their outputs are ignored) so every softmax row stays well-defined.
    """
    pos = torch.arange(n, device=t_e.device)
    key_valid = pos[None, :] < lengths[:, None]
    key_enroll = pos[None, :] < t_e[:, None]
    query_enroll = key_enroll
    allowed = key_enroll[:, None, :] | ~query_enroll[:, :, None]
    return allowed & key_valid[:, None, :]


def sinusoidal_embedding(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = scale * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if torch.any((t < 0) | (t > 1)):
            raise ValueError("flow time must lie in [0, 1]")
        return self.mlp(sinusoidal_embedding(t, self.freq_dim))


def rotary_tables(n: int, head_dim: int, dtype, device, base: float = 10000.0):
    inv_freq = 1.0 / base ** (torch.arange(0, head_dim, 2, dtype=dtype, device=device) / head_dim)
    angles = torch.arange(n, dtype=dtype, device=device)[:, None] * inv_freq[None, :]
    return torch.cos(angles), torch.sin(angles)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return rotated.flatten(-2)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask, rope):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        cos, sin = rope
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class DiTBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(approximate="tanh"), nn.Linear(ff_dim, dim))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x, temb, mask, rope):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(temb).chunk(6, dim=-1)
        x = x + gate1[:, None, :] * self.attn(modulate(self.norm1(x), shift1, scale1), mask, rope)
        x = x + gate2[:, None, :] * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


class VelocityField(nn.Module):
    """u_theta(x_t, t | cond) over a padded batch of concatenated sequences."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.time_embed = TimestepEmbedding(d)
        self.in_proj = nn.Linear(2 * cfg.mel_dim, d)
        self.null_cond = nn.Parameter(torch.zeros(cfg.mel_dim))
        self.blocks = nn.ModuleList([DiTBlock(d, cfg.n_heads, cfg.ff_dim) for _ in range(cfg.n_layers)])
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.out_proj = nn.Linear(d, cfg.mel_dim)
        if seed is None:
            self.reset_parameters()
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        for m in self.time_embed.mlp:
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
        nn.init.normal_(self.null_cond, std=0.02)
        # adaLN-Zero: every residual branch and the output start at zero
        for block in self.blocks:
            nn.init.zeros_(block.ada[-1].weight)
            nn.init.zeros_(block.ada[-1].bias)
        nn.init.zeros_(self.final_ada[-1].weight)
        nn.init.zeros_(self.final_ada[-1].bias)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(
        self,
        x: torch.Tensor,
        cond: torch.Tensor,
        t: torch.Tensor,
        t_e: torch.Tensor,
        lengths: torch.Tensor | None = None,
        drop: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """
        Args:
            x: noisy state, (B, N, mel_dim).
            cond: concatenated [enrollment | mixed] mels, (B, N, mel_dim).
            t: flow times in [0, 1], (B,).
            t_e: enrollment frame counts, (B,).
            lengths: valid frames per example (default N).
            drop: per-example flag replacing ``cond`` with the learned null embedding.

        Returns:
            Velocity with the same shape as ``x``.
        """
        if x.shape != cond.shape:
            raise ValueError(f"state {tuple(x.shape)} and conditioning {tuple(cond.shape)} differ")
        b, n, d = x.shape
        if d != self.cfg.mel_dim:
            raise ValueError(f"expected mel_dim={self.cfg.mel_dim}, got {d}")
        if t.shape != (b,) or t_e.shape != (b,):
            raise ValueError("t and t_e must have shape (B,)")
        if lengths is None:
            lengths = torch.full((b,), n, dtype=torch.long, device=x.device)
        if torch.any(t_e < 1) or torch.any(lengths <= t_e) or torch.any(lengths > n):
            raise ValueError("each example needs >= 1 enrollment and >= 1 mixed frame within N")
        if drop is not None:
            cond = torch.where(drop[:, None, None], self.null_cond.to(cond.dtype).expand_as(cond), cond)

        h = self.in_proj(torch.cat([x, cond], dim=-1))
        temb = self.time_embed(t)
        mask = batch_attention_mask(t_e, lengths, n)
        rope = rotary_tables(n, self.cfg.embed_dim // self.cfg.n_heads, h.dtype, h.device)
        for block in self.blocks:
            h = block(h, temb, mask, rope)
        shift, scale = self.final_ada(temb).chunk(2, dim=-1)
        return self.out_proj(modulate(self.final_norm(h), shift, scale))

    def velocity(self, state: FlowState, cond: ConditioningInput) -> np.ndarray:
        """Single-example convenience wrapper around :meth:`forward`."""
        values = np.asarray(state.values)
        if values.shape != (cond.t_e + cond.t_m, self.cfg.mel_dim):
            raise ValueError(f"state shape {values.shape} does not match conditioning")
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(values, dtype=dtype)[None]
        c = torch.as_tensor(cond.concatenated(), dtype=dtype)[None]
        with torch.no_grad():
            out = self(
                x,
                c,
                torch.tensor([state.time], dtype=dtype),
                torch.tensor([cond.t_e]),
                drop=torch.tensor([cond.dropped]),
            )
        return out[0].numpy()


def time_embedding(model: VelocityField, t: float) -> torch.Tensor:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return model.time_embed(torch.tensor([t], dtype=dtype))[0]
