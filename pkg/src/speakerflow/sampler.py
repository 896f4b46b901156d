"""Fixed-step ODE integration of the learned velocity field, with optional CFG."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .config import FeatureConfig, SamplerConfig
from .dsp import MelSpectrogram, Waveform, log_mel
from .model import ConditioningInput, VelocityField

VelocityFn = Callable[[torch.Tensor, float], torch.Tensor]


class IntegrationError(FloatingPointError):
    pass


def guided_velocity(u_cond: torch.Tensor, u_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance u_u + w (u_c - u_u), written so w=0 and w=1 are exact."""
    return (1.0 - w) * u_uncond + w * u_cond


def model_velocity_fn(model: VelocityField, cond: ConditioningInput, cfg_scale: float) -> VelocityFn:
    """Wrap the network as f(x, t) for one example, applying guidance when w != 1."""
    dtype = next(model.parameters()).dtype
    c = torch.as_tensor(cond.concatenated(), dtype=dtype)[None]
    t_e = torch.tensor([cond.t_e])
    c_drop = torch.tensor([cond.dropped])

    def velocity(x: torch.Tensor, t: float) -> torch.Tensor:
        tt = torch.tensor([t], dtype=dtype)
        if cfg_scale == 1.0 or cond.dropped:
            return model(x[None], c, tt, t_e, drop=c_drop)[0]
        # conditional and unconditional passes share one batch
        both = model(
            torch.stack([x, x]), c.expand(2, -1, -1), tt.expand(2), t_e.expand(2), drop=torch.tensor([False, True])
        )
        return guided_velocity(both[0], both[1], cfg_scale)

    return velocity


def integrate_field(
    velocity: VelocityFn, x0: torch.Tensor, n_steps: int, method: str = "midpoint"
) -> torch.Tensor:
    """Integrate dx/dt = velocity(x, t) from t=0 to t=1 on a uniform grid."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if method not in ("euler", "midpoint"):
        raise ValueError(f"unknown solver {method!r}")
    dt = 1.0 / n_steps
    x = x0
    for i in range(n_steps):
        t = i * dt
        if method == "euler":
            x = x + dt * velocity(x, t)
        else:
            x_mid = x + 0.5 * dt * velocity(x, t)
            x = x + dt * velocity(x_mid, t + 0.5 * dt)
        if not torch.all(torch.isfinite(x)):
            raise IntegrationError(f"non-finite state after step {i + 1} of {n_steps}")
    return x


@torch.no_grad()
def integrate(model: VelocityField, cond: ConditioningInput, cfg: SamplerConfig = SamplerConfig()) -> np.ndarray:
    """Sample the full (t_e + t_m, d) terminal state from x0 ~ N(0, I)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    g = torch.Generator().manual_seed(cfg.seed)
    x0 = torch.randn((cond.t_e + cond.t_m, cond.mixed_mel.shape[1]), generator=g, dtype=dtype)
    fn = model_velocity_fn(model, cond, cfg.cfg_scale)
    return integrate_field(fn, x0, cfg.n_steps, cfg.method).numpy()


def extract(
    model: VelocityField,
    enrollment: Waveform,
    mixed: Waveform,
    cfg: SamplerConfig = SamplerConfig(),
    features: FeatureConfig = FeatureConfig(),
) -> MelSpectrogram:
    """Estimate the target speaker's mel over the mixture's frames.

    Speech-enhancement use: pass the mixture itself as ``enrollment``.
    """
    enroll_mel = log_mel(enrollment, features).frames
    mixed_mel = log_mel(mixed, features).frames
    cond = ConditioningInput(enroll_mel, mixed_mel)
    full = integrate(model, cond, cfg)
    return MelSpectrogram(
        frames=full[cond.t_e :].astype(np.float64),
        n_mels=features.n_mels,
        hop=features.hop,
        sample_rate=features.sample_rate,
    )


MEL_FORMAT_VERSION = 1


def save_mel(path, mel: MelSpectrogram, features: FeatureConfig = FeatureConfig()) -> None:
    np.savez(
        path,
        format_version=np.int64(MEL_FORMAT_VERSION),
        frames=mel.frames,
        feature_config_hash=np.str_(features.hash()),
        sample_rate=np.int64(features.sample_rate),
        n_fft=np.int64(features.n_fft),
        hop=np.int64(features.hop),
        n_mels=np.int64(features.n_mels),
        log_floor=np.float64(features.log_floor),
    )


def load_mel(path, features: FeatureConfig | None = None) -> MelSpectrogram:
    with np.load(path) as data:
        if int(data["format_version"]) != MEL_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported mel container version")
        stored = FeatureConfig(
            sample_rate=int(data["sample_rate"]),
            n_fft=int(data["n_fft"]),
            hop=int(data["hop"]),
            n_mels=int(data["n_mels"]),
            log_floor=float(data["log_floor"]),
        )
        if features is not None and stored.hash() != features.hash():
            raise ValueError(f"{path}: feature config mismatch")
        return MelSpectrogram(data["frames"], stored.n_mels, stored.hop, stored.sample_rate)
