"""Reference-based metrics and the evaluation report.

Perceptual and model-based scores (PESQ, ESTOI, DNSMOS, WER, embedder
similarity) need external models, so the report uses SI-SDR, log-spectral
distance and a mel-cosine proxy instead.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, FeatureConfig, config_hash
from .dsp import Waveform, log_mel, read_wav, si_sdr, stft
from .mixing import read_manifest

log = logging.getLogger(__name__)

SUBSTITUTION_NOTE = (
    "PESQ/ESTOI/DNSMOS/WER and embedder similarity are not computed; "
    "reported instead: SI-SDR (dB), log-spectral distance (dB) and mean-centred mel cosine."
)
METRICS = ("si_sdr_db", "si_sdr_mixture_db", "si_sdr_improvement_db", "lsd_db", "mel_cosine")
BOOTSTRAP_RESAMPLES = 1000
LSD_FLOOR = 1e-10


def _check_lengths(estimate: Waveform, reference: Waveform):
    if len(estimate) != len(reference):
        raise ValueError(f"length mismatch: estimate {len(estimate)} vs reference {len(reference)} samples")


def log_spectral_distance(
    estimate: Waveform, reference: Waveform, n_fft: int = 1024, hop: int = 256, floor: float = LSD_FLOOR
) -> float:
    """RMS over frames of the per-frame RMS difference of dB magnitude spectra."""
    _check_lengths(estimate, reference)
    e = 20 * np.log10(np.maximum(np.abs(stft(estimate, n_fft, hop).bins), floor))
    r = 20 * np.log10(np.maximum(np.abs(stft(reference, n_fft, hop).bins), floor))
    per_frame = np.sqrt(np.mean((e - r) ** 2, axis=0))
    return float(np.sqrt(np.mean(per_frame**2)))


def mel_cosine_similarity(estimate: Waveform, reference: Waveform, features: FeatureConfig = FeatureConfig()) -> float:
    """Cosine between mean-centred, time-averaged log-mel vectors."""
    vecs = []
    for name, w in (("estimate", estimate), ("reference", reference)):
        if not np.any(w.samples):
            raise ValueError(f"{name} is silent")
        v = log_mel(w, features).frames.mean(axis=0)
        vecs.append(v - v.mean())
    a, b = vecs
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        raise ValueError("log-mel profile is flat; cosine undefined")
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def bootstrap_interval(values, n_resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0, level: float = 0.95):
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_resamples, len(values)))
    means = values[idx].mean(axis=1)
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return float(lo), float(hi)


@dataclass
class EvalReport:
    per_example: list[dict]
    aggregate: dict[str, dict[str, float]]
    config_hash: str
    missing: list[str] = field(default_factory=list)
    note: str = SUBSTITUTION_NOTE

    def to_json(self) -> str:
        return json.dumps(
            {
                "note": self.note,
                "config_hash": self.config_hash,
                "n_examples": len(self.per_example),
                "missing": self.missing,
                "aggregate": self.aggregate,
                "per_example": self.per_example,
            },
            indent=2,
            sort_keys=True,
        )

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        json_path, csv_path = out / "report.json", out / "report.csv"
        json_path.write_text(self.to_json() + "\n")
        with open(csv_path, "w", newline="") as fh:
            fh.write(f"# {self.note}\n# config_hash={self.config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(("example_id",) + METRICS)
            for row in self.per_example:
                writer.writerow([row["example_id"]] + [repr(row[m]) for m in METRICS])
        return json_path, csv_path


def aggregate_rows(rows: list[dict], seed: int = 0) -> dict[str, dict[str, float]]:
    agg = {}
    for m in METRICS:
        vals = [r[m] for r in rows]
        lo, hi = bootstrap_interval(vals, seed=seed)
        agg[m] = {"mean": float(np.mean(vals)), "ci95_low": lo, "ci95_high": hi}
    return agg


def score_example(example_id: str, output: Waveform, target: Waveform, mixed: Waveform, features=FeatureConfig()) -> dict:
    est = si_sdr(output, target)
    base = si_sdr(mixed, target)
    return {
        "example_id": example_id,
        "si_sdr_db": est,
        "si_sdr_mixture_db": base,
        "si_sdr_improvement_db": est - base,
        "lsd_db": log_spectral_distance(output, target, features.n_fft, features.hop),
        "mel_cosine": mel_cosine_similarity(output, target, features),
    }


def evaluate(
    manifest: str | Path,
    outputs_dir: str | Path,
    out_dir: str | Path | None = None,
    features: FeatureConfig = FeatureConfig(),
    config: Config | None = None,
    seed: int = 0,
) -> EvalReport:
    """Score ``outputs_dir/<example_id>.wav`` against each manifest row's target.

    Rows without a usable output are listed in ``missing`` and skipped.
    """
    manifest = Path(manifest)
    outputs_dir = Path(outputs_dir)
    rows, missing = [], []
    for row in read_manifest(manifest):
        path = outputs_dir / f"{row['id']}.wav"
        if not path.exists():
            missing.append(row["id"])
            continue
        output = read_wav(path, features.sample_rate)
        target = read_wav(manifest.parent / row["target"], features.sample_rate)
        mixed = read_wav(manifest.parent / row["mixed"], features.sample_rate)
        if len(output) != len(target):
            log.warning("%s: output has %d samples, target %d; skipped", row["id"], len(output), len(target))
            missing.append(row["id"])
            continue
        rows.append(score_example(row["id"], output, target, mixed, features))
    if missing:
        log.warning("missing or unusable outputs: %s", ", ".join(missing))
    if not rows:
        raise FileNotFoundError(f"no usable outputs in {outputs_dir}; missing: {missing}")
    report = EvalReport(rows, aggregate_rows(rows, seed), config_hash(config or Config()), missing)
    if out_dir is not None:
        report.write(out_dir)
    return report
