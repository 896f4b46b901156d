"""Training-mixture synthesis over a per-speaker utterance corpus.

A corpus is a JSONL manifest of utterance records. ``sample_mixture`` turns a
single integer seed into one fully-determined example: two distinct speakers
mixed at a uniform random SNR, optional background noise, and an enrollment
crop from a different utterance of the target speaker.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import FeatureConfig, MixConfig, ToyCorpusConfig
from .dsp import Waveform, mix_at_snr, read_wav, write_wav

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UtteranceRecord:
    speaker_id: str
    utterance_id: str
    path: str
    duration: float


@dataclass(frozen=True, eq=False)
class MixtureExample:
    mixed: Waveform
    target: Waveform
    enrollment: Waveform
    interferer: Waveform
    noise: Waveform | None
    speech_snr_db: float
    noise_snr_db: float | None
    target_speaker_id: str
    interferer_speaker_id: str
    target_utterance_id: str
    interferer_utterance_id: str
    enrollment_utterance_id: str
    seed: int

    def metadata(self) -> dict:
        return {
            "speech_snr_db": self.speech_snr_db,
            "noise_snr_db": self.noise_snr_db,
            "target_speaker_id": self.target_speaker_id,
            "interferer_speaker_id": self.interferer_speaker_id,
            "target_utterance_id": self.target_utterance_id,
            "interferer_utterance_id": self.interferer_utterance_id,
            "enrollment_utterance_id": self.enrollment_utterance_id,
            "seed": self.seed,
        }


class CorpusError(ValueError):
    pass


class DatasetBuildError(RuntimeError):
    pass


class Corpus:
    """Utterance records grouped by speaker, with an in-memory audio cache."""

    def __init__(self, records: list[UtteranceRecord], root: Path, sample_rate: int = 24000):
        self.records = list(records)
        self.root = Path(root)
        self.sample_rate = sample_rate
        self.by_speaker: dict[str, list[UtteranceRecord]] = {}
        for rec in self.records:
            self.by_speaker.setdefault(rec.speaker_id, []).append(rec)
        self.speakers = sorted(self.by_speaker)
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def load(cls, manifest: str | Path, sample_rate: int = 24000) -> "Corpus":
        manifest = Path(manifest)
        records = []
        with open(manifest) as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = UtteranceRecord(**json.loads(line))
                if rec.duration <= 0:
                    raise CorpusError(f"{manifest}:{line_no}: non-positive duration")
                if not (manifest.parent / rec.path).exists():
                    raise CorpusError(f"{manifest}:{line_no}: missing audio file {rec.path}")
                records.append(rec)
        return cls(records, manifest.parent, sample_rate)

    def __len__(self) -> int:
        return len(self.records)

    def audio(self, rec: UtteranceRecord) -> np.ndarray:
        if rec.utterance_id not in self._cache:
            self._cache[rec.utterance_id] = read_wav(self.root / rec.path, self.sample_rate).samples
        return self._cache[rec.utterance_id]

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state


def example_seed(base_seed: int, index: int) -> int:
    """Per-example seed derived from (base_seed, index); independent of worker layout."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint32)[0])


def _fit_noise(noise: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(noise) < n:
        reps = -(-n // len(noise))
        return np.tile(noise, reps)[:n]
    start = int(rng.integers(0, len(noise) - n + 1))
    return noise[start : start + n]


def sample_mixture(
    corpus: Corpus,
    noise_corpus: Corpus | None,
    rng_seed: int,
    cfg: MixConfig = MixConfig(),
) -> MixtureExample:
    eligible = [s for s in corpus.speakers if len(corpus.by_speaker[s]) >= 2]
    if len(corpus.speakers) < 2 or not eligible:
        raise CorpusError("corpus needs >= 2 speakers and at least one speaker with >= 2 utterances")
    sr = corpus.sample_rate
    rng = np.random.default_rng(rng_seed)

    # a target with a single utterance cannot supply a distinct enrollment; redraw
    while True:
        target_spk = corpus.speakers[int(rng.integers(len(corpus.speakers)))]
        if len(corpus.by_speaker[target_spk]) >= 2:
            break
    others = [s for s in corpus.speakers if s != target_spk]
    interf_spk = others[int(rng.integers(len(others)))]

    target_utts = corpus.by_speaker[target_spk]
    t_idx = int(rng.integers(len(target_utts)))
    e_choices = [i for i in range(len(target_utts)) if i != t_idx]
    e_idx = e_choices[int(rng.integers(len(e_choices)))]
    interf_utts = corpus.by_speaker[interf_spk]
    i_idx = int(rng.integers(len(interf_utts)))
    t_rec, e_rec, i_rec = target_utts[t_idx], target_utts[e_idx], interf_utts[i_idx]

    target = corpus.audio(t_rec)
    interferer = corpus.audio(i_rec)
    n = min(len(target), len(interferer))
    target, interferer = target[:n], interferer[:n]

    speech_snr = float(rng.uniform(cfg.snr_low, cfg.snr_high))
    speech_mix, scale = mix_at_snr(Waveform(target, sr), Waveform(interferer, sr), speech_snr)
    interferer = scale * interferer

    use_noise = bool(rng.random() < cfg.noise_prob)
    noise = None
    noise_snr = None
    mixed = speech_mix.samples
    if use_noise and noise_corpus is not None and len(noise_corpus):
        n_rec = noise_corpus.records[int(rng.integers(len(noise_corpus)))]
        noise_raw = _fit_noise(noise_corpus.audio(n_rec), n, rng)
        noise_snr = float(rng.uniform(cfg.noise_snr_low, cfg.noise_snr_high))
        noisy, n_scale = mix_at_snr(speech_mix, Waveform(noise_raw, sr), noise_snr)
        noise = n_scale * noise_raw
        mixed = noisy.samples

    enroll_src = corpus.audio(e_rec)
    enroll_len = int(round(rng.uniform(cfg.enroll_min_s, cfg.enroll_max_s) * sr))
    enroll_len = min(enroll_len, len(enroll_src))
    start = int(rng.integers(0, len(enroll_src) - enroll_len + 1))
    enrollment = enroll_src[start : start + enroll_len]

    peak = float(np.max(np.abs(mixed)))
    if peak > 1.0:
        gain = cfg.peak_limit / peak
        mixed, target, interferer = gain * mixed, gain * target, gain * interferer
        noise = None if noise is None else gain * noise
    e_peak = float(np.max(np.abs(enrollment)))
    if e_peak > 1.0:
        enrollment = enrollment * (cfg.peak_limit / e_peak)

    return MixtureExample(
        mixed=Waveform(mixed, sr),
        target=Waveform(target, sr),
        enrollment=Waveform(enrollment, sr),
        interferer=Waveform(interferer, sr),
        noise=None if noise is None else Waveform(noise, sr),
        speech_snr_db=speech_snr,
        noise_snr_db=noise_snr,
        target_speaker_id=target_spk,
        interferer_speaker_id=interf_spk,
        target_utterance_id=t_rec.utterance_id,
        interferer_utterance_id=i_rec.utterance_id,
        enrollment_utterance_id=e_rec.utterance_id,
        seed=int(rng_seed),
    )


STEMS = ("mixed", "target", "enrollment", "interferer", "noise")


def _write_example(args):
    corpus, noise_corpus, index, base_seed, out_dir, cfg = args
    seed = example_seed(base_seed, index)
    try:
        ex = sample_mixture(corpus, noise_corpus, seed, cfg)
        row = {"id": f"{index:06d}"}
        for stem in STEMS:
            w = getattr(ex, stem)
            if w is None:
                continue
            rel = f"wav/{index:06d}_{stem}.wav"
            write_wav(out_dir / rel, w)
            row[stem] = rel
        row.update(ex.metadata())
        if row["noise_snr_db"] is None:
            del row["noise_snr_db"]
        return row
    except OSError as exc:
        raise DatasetBuildError(f"example {index}: {exc}") from exc


def build_dataset(
    corpus: Corpus,
    noise_corpus: Corpus | None,
    n_examples: int,
    base_seed: int,
    out_dir: str | Path,
    cfg: MixConfig = MixConfig(),
    workers: int = 1,
) -> Path:
    """Render ``n_examples`` mixtures as WAV stems plus ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if n_examples > 0:
        (out_dir / "wav").mkdir(exist_ok=True)
    jobs = [(corpus, noise_corpus, i, base_seed, out_dir, cfg) for i in range(n_examples)]
    if workers > 1 and n_examples > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_write_example, jobs))
    else:
        rows = [_write_example(job) for job in jobs]
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    log.info("wrote %d examples to %s", n_examples, manifest)
    return manifest


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_example_stems(row: dict, root: Path, sample_rate: int = 24000) -> dict[str, Waveform]:
    return {stem: read_wav(root / row[stem], sample_rate) for stem in STEMS if stem in row}


# -- synthetic corpora -------------------------------------------------------


def _harmonic_utterance(rng, f0, tilt, formant, sr, duration, n_harmonics):
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    vib_rate, vib_phase = rng.uniform(3.0, 6.0), rng.uniform(0, 2 * np.pi)
    drift = rng.uniform(-0.03, 0.03)
    f0_track = f0 * (1.0 + 0.03 * np.sin(2 * np.pi * vib_rate * t + vib_phase) + drift * t / duration)
    phase = 2 * np.pi * np.cumsum(f0_track) / sr
    x = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        if k * f0 * 1.1 >= 0.45 * sr:
            break
        bump = np.exp(-0.5 * ((k * f0 - formant) / 400.0) ** 2)
        amp = k ** (-tilt) * (0.5 + 0.5 * bump)
        x += amp * np.cos(k * phase + rng.uniform(0, 2 * np.pi))
    # syllable-rate envelope kept well above zero so every frame is voiced
    syl_rate, syl_phase = rng.uniform(2.5, 5.0), rng.uniform(0, 2 * np.pi)
    env = 0.6 + 0.35 * np.sin(2 * np.pi * syl_rate * t + syl_phase)
    ramp = min(n // 2, int(0.01 * sr))
    env[:ramp] *= np.linspace(0.2, 1.0, ramp)
    env[n - ramp :] *= np.linspace(1.0, 0.2, ramp)
    x *= env
    return 0.1 * x / np.sqrt(np.mean(x**2))


def synthetic_toy_corpus(
    n_speakers: int,
    utterances_per_speaker: int,
    out_dir: str | Path,
    seed: int = 0,
    cfg: ToyCorpusConfig = ToyCorpusConfig(),
    features: FeatureConfig = FeatureConfig(),
    f0s: list[float] | None = None,
) -> Path:
    """Write harmonic-complex "speakers" with distinct pitch, tilt and formant.

    Each speaker has a fixed fundamental (spread evenly over the configured
    range unless ``f0s`` is given), spectral tilt and formant centre; each
    utterance varies duration, vibrato and syllable envelope.
    """
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    if f0s is not None and len(f0s) != n_speakers:
        raise ValueError("f0s must list one fundamental per speaker")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    sr = features.sample_rate
    if f0s is None:
        f0s = list(np.linspace(cfg.f0_low, cfg.f0_high, n_speakers))
    records = []
    for s in range(n_speakers):
        spk_rng = np.random.default_rng([seed, s])
        tilt = spk_rng.uniform(1.0, 1.6)
        formant = spk_rng.uniform(500.0, 2500.0)
        speaker_id = f"spk{s:03d}"
        for u in range(utterances_per_speaker):
            rng = np.random.default_rng([seed, s, u + 1])
            duration = float(rng.uniform(cfg.min_duration_s, cfg.max_duration_s))
            x = _harmonic_utterance(rng, float(f0s[s]), tilt, formant, sr, duration, cfg.n_harmonics)
            utt_id = f"{speaker_id}_u{u:03d}"
            rel = f"wav/{utt_id}.wav"
            write_wav(out_dir / rel, Waveform(x, sr))
            records.append(UtteranceRecord(speaker_id, utt_id, rel, len(x) / sr))
    return _write_corpus_manifest(records, out_dir)


def synthetic_noise_corpus(
    n_clips: int,
    out_dir: str | Path,
    seed: int = 0,
    duration_s: float = 3.0,
    features: FeatureConfig = FeatureConfig(),
) -> Path:
    """Coloured (1/f^beta) noise clips standing in for a background-noise corpus."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    sr = features.sample_rate
    n = int(round(duration_s * sr))
    records = []
    for c in range(n_clips):
        rng = np.random.default_rng([seed, 10_000 + c])
        beta = rng.uniform(0.0, 2.0)
        spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        spec *= 1.0 / np.maximum(freqs, 20.0) ** (beta / 2)
        x = np.fft.irfft(spec, n)
        x = 0.1 * x / np.sqrt(np.mean(x**2))
        utt_id = f"noise_{c:03d}"
        rel = f"wav/{utt_id}.wav"
        write_wav(out_dir / rel, Waveform(x, sr))
        records.append(UtteranceRecord("noise", utt_id, rel, n / sr))
    return _write_corpus_manifest(records, out_dir)


def _write_corpus_manifest(records: list[UtteranceRecord], out_dir: Path) -> Path:
    manifest = out_dir / "corpus.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")
    return manifest
