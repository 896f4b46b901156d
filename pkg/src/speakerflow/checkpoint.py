"""Versioned checkpoint container shared by the flow model and the vocoder."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import torch

from .config import FeatureConfig

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    kind: str,
    model: torch.nn.Module,
    model_config,
    features: FeatureConfig,
    step: int = 0,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "model_config": dataclasses.asdict(model_config),
        "features": dataclasses.asdict(features),
        "feature_config_hash": features.hash(),
        "step": int(step),
        "params": {name: t.detach().cpu().clone() for name, t in model.state_dict().items()},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, kind: str, features: FeatureConfig | None = None) -> dict:
    """Read and validate a checkpoint; refuses wrong kinds and feature configs."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {payload.get('kind')!r}")
    stored = FeatureConfig(**payload["features"])
    if stored.hash() != payload["feature_config_hash"]:
        raise CheckpointError(f"{path}: feature config hash does not match its stored config")
    if features is not None and features.hash() != payload["feature_config_hash"]:
        raise CheckpointError(
            f"{path}: feature config mismatch (checkpoint {payload['features']}, requested {dataclasses.asdict(features)})"
        )
    payload["features"] = stored
    return payload
