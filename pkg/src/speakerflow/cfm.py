"""Conditional flow matching on the straight-line (optimal-transport) path.

The regression target for a pair (x0 ~ N(0, I), x1 = data) at time t is the
constant velocity x1 - x0 of the path x_t = (1 - t) x0 + t x1.
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

from .checkpoint import load_checkpoint, save_checkpoint
from .config import FeatureConfig, ModelConfig, TrainConfig
from .dsp import log_mel, read_wav
from .mixing import read_manifest
from .model import VelocityField

log = logging.getLogger(__name__)


@dataclass
class PathSample:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    xt: torch.Tensor

    @property
    def target(self) -> torch.Tensor:
        return self.x1 - self.x0


def _expand_time(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    return t.reshape(t.shape + (1,) * (like.dim() - t.dim()))


def make_path_sample(x1: torch.Tensor, t, generator: torch.Generator | None = None) -> PathSample:
    """Draw x0 ~ N(0, I) and place the sample at time ``t`` on the straight path.

    ``t`` is a float for a single (N, d) matrix or a (B,) tensor for a batch.
    """
    t = torch.as_tensor(t, dtype=x1.dtype)
    if torch.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    te = _expand_time(t, x1)
    return PathSample(x0=x0, x1=x1, t=t, xt=(1 - te) * x0 + te * x1)


def cfm_loss(velocity_pred: torch.Tensor, sample: PathSample, region_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared velocity error over the frames selected by ``region_mask``.

    ``region_mask`` is a per-frame boolean (or non-negative weight) tensor with
    the shape of the prediction minus its channel axis.
    """
    target = sample.target
    if velocity_pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(velocity_pred.shape)} vs target {tuple(target.shape)}")
    weights = region_mask.to(velocity_pred.dtype)
    if weights.shape != velocity_pred.shape[:-1]:
        raise ValueError("region_mask must have one entry per frame")
    total = weights.sum()
    if total <= 0:
        raise ValueError("region_mask selects no frames")
    err = ((velocity_pred - target) ** 2).sum(-1)
    return (err * weights).sum() / (total * velocity_pred.shape[-1])


def batch_by_frames(frame_counts: list[int], batch_frames: int, ids: list[str] | None = None) -> list[list[int]]:
    """Greedy length-bucketed packing; returns lists of example indices."""
    for i, n in enumerate(frame_counts):
        if n > batch_frames:
            name = ids[i] if ids is not None else str(i)
            raise ValueError(f"example {name} has {n} frames, exceeding batch_frames={batch_frames}")
    order = sorted(range(len(frame_counts)), key=lambda i: frame_counts[i])
    batches, current, used = [], [], 0
    for i in order:
        if current and used + frame_counts[i] > batch_frames:
            batches.append(current)
            current, used = [], 0
        current.append(i)
        used += frame_counts[i]
    if current:
        batches.append(current)
    return batches


def lr_at(step: int, total_steps: int, lr_peak: float, warmup_frac: float) -> float:
    """Linear warmup to ``lr_peak`` then linear decay to zero; ``step`` is 1-based."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step <= warmup:
        return lr_peak * step / warmup
    return lr_peak * max(0.0, (total_steps - step) / max(1, total_steps - warmup))


@dataclass
class TrainItem:
    example_id: str
    enrollment_mel: np.ndarray
    mixed_mel: np.ndarray
    target_mel: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.enrollment_mel.shape[0] + self.mixed_mel.shape[0]


def load_items(manifest: str | Path, features: FeatureConfig = FeatureConfig()) -> list[TrainItem]:
    manifest = Path(manifest)
    root = manifest.parent
    items = []
    for row in read_manifest(manifest):
        mel = {
            stem: log_mel(read_wav(root / row[stem], features.sample_rate), features).frames
            for stem in ("enrollment", "mixed", "target")
        }
        items.append(TrainItem(row["id"], mel["enrollment"], mel["mixed"], mel["target"]))
    return items


@dataclass
class Batch:
    ids: list[str]
    x1: torch.Tensor
    cond: torch.Tensor
    t_e: torch.Tensor
    lengths: torch.Tensor

    def region_weights(self, enroll_weight: float = 0.0) -> torch.Tensor:
        """Per-frame loss weights: mixed frames 1, enrollment ``enroll_weight``, padding 0."""
        pos = torch.arange(self.x1.shape[1])[None, :]
        valid = pos < self.lengths[:, None]
        enroll = pos < self.t_e[:, None]
        weights = (valid & ~enroll).to(self.x1.dtype)
        if enroll_weight:
            weights = weights + enroll_weight * enroll.to(self.x1.dtype)
        return weights


def collate(items: list[TrainItem], dtype=torch.float32) -> Batch:
    n = max(it.n_frames for it in items)
    d = items[0].mixed_mel.shape[1]
    x1 = np.zeros((len(items), n, d))
    cond = np.zeros((len(items), n, d))
    for b, it in enumerate(items):
        te, tm = it.enrollment_mel.shape[0], it.mixed_mel.shape[0]
        x1[b, :te] = it.enrollment_mel
        x1[b, te : te + tm] = it.target_mel
        cond[b, :te] = it.enrollment_mel
        cond[b, te : te + tm] = it.mixed_mel
    return Batch(
        ids=[it.example_id for it in items],
        x1=torch.as_tensor(x1, dtype=dtype),
        cond=torch.as_tensor(cond, dtype=dtype),
        t_e=torch.tensor([it.enrollment_mel.shape[0] for it in items]),
        lengths=torch.tensor([it.n_frames for it in items]),
    )


class TrainingDiverged(RuntimeError):
    pass


def cfm_step_loss(model, batch: Batch, generator: torch.Generator, drop_prob: float, enroll_weight: float = 0.0):
    """One stochastic CFM loss evaluation; returns (loss, t)."""
    b = batch.x1.shape[0]
    t = torch.rand(b, generator=generator, dtype=batch.x1.dtype)
    sample = make_path_sample(batch.x1, t, generator)
    drop = torch.rand(b, generator=generator) < drop_prob
    pred = model(sample.xt, batch.cond, t, batch.t_e, batch.lengths, drop)
    return cfm_loss(pred, sample, batch.region_weights(enroll_weight)), t


@dataclass
class TrainResult:
    losses: list[float]
    checkpoints: list[Path]
    loss_log: Path | None


def train(
    manifest: str | Path | list[TrainItem],
    model: VelocityField,
    cfg: TrainConfig = TrainConfig(),
    out_dir: str | Path | None = None,
    features: FeatureConfig = FeatureConfig(),
) -> TrainResult:
    """Run the CFM training loop; logs ``loss.csv`` and checkpoints into ``out_dir``."""
    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    items = manifest if isinstance(manifest, list) else load_items(manifest, features)
    if not items:
        raise ValueError("training manifest is empty")
    batches = batch_by_frames([it.n_frames for it in items], cfg.batch_frames, [it.example_id for it in items])
    collated = [collate([items[i] for i in idx], dtype=next(model.parameters()).dtype) for idx in batches]
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * len(batches)

    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_peak, weight_decay=cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "loss.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "t_mean"])
    losses, checkpoints = [], []
    model.train()
    try:
        step = 0
        while step < total:
            for bi in order_rng.permutation(len(collated)):
                step += 1
                if step > total:
                    break
                batch = collated[bi]
                lr = lr_at(step, total, cfg.lr_peak, cfg.warmup_frac)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                loss, t = cfm_step_loss(model, batch, generator, cfg.cond_drop_prob, cfg.enroll_loss_weight)
                if not torch.isfinite(loss):
                    _dump_divergence(out, step, batch.ids, t)
                    raise TrainingDiverged(
                        f"non-finite loss at step {step} (examples {batch.ids}, t={t.tolist()})"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                value = loss.item()
                losses.append(value)
                if writer is not None:
                    writer.writerow([step, f"{value:.8g}", f"{lr:.8g}", f"{t.mean().item():.8g}"])
                if out is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                    checkpoints.append(save_checkpoint(out / f"ckpt_{step:07d}.pt", "flow", model, model.cfg, features, step))
                if step % 100 == 0:
                    log.info("step %d loss %.4f lr %.2e", step, value, lr)
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        checkpoints.append(save_checkpoint(out / "final.pt", "flow", model, model.cfg, features, total))
        (out / "train_config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True))
    model.eval()
    return TrainResult(losses, checkpoints, out / "loss.csv" if out is not None else None)


def _dump_divergence(out: Path | None, step: int, ids: list[str], t: torch.Tensor):
    if out is None:
        return
    diag = {"step": step, "example_ids": ids, "t": t.tolist()}
    (out / "divergence.json").write_text(json.dumps(diag, indent=2))


def load_flow_model(path: str | Path, features: FeatureConfig | None = None) -> tuple[VelocityField, FeatureConfig]:
    payload = load_checkpoint(path, "flow", features)
    model = VelocityField(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload["features"]


def expected_initial_loss(batch: Batch, generator: torch.Generator, n_draws: int = 64) -> float:
    """Monte-Carlo estimate of E||x1 - x0||^2 per element over the mixed region."""
    weights = batch.region_weights()
    vals = []
    for _ in range(n_draws):
        x0 = torch.randn(batch.x1.shape, generator=generator, dtype=batch.x1.dtype)
        err = ((batch.x1 - x0) ** 2).sum(-1)
        vals.append(((err * weights).sum() / (weights.sum() * batch.x1.shape[-1])).item())
    return float(np.mean(vals))

