"""Command-line entry point: ``speakerflow <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from .cfm import load_flow_model, train
from .config import Config, dump_config, load_config
from .dsp import MelSpectrogram, read_wav, stft, write_wav
from .evaluation import evaluate
from .mixing import Corpus, build_dataset, read_manifest, synthetic_noise_corpus, synthetic_toy_corpus
from .model import VelocityField
from .sampler import extract, load_mel, save_mel
from .vocoder import PhaseVocoder, load_vocoder, train_vocoder, vocode

log = logging.getLogger("speakerflow")


def _with_seed(section, seed):
    return section if seed is None else dataclasses.replace(section, seed=seed)


def cmd_toy_corpus(args, cfg: Config):
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    speech = synthetic_toy_corpus(args.speakers, args.utterances, out / "speech", seed, cfg.toy, cfg.features)
    noise = synthetic_noise_corpus(args.noise_clips, out / "noise", seed, features=cfg.features)
    print(speech)
    print(noise)


def cmd_mix(args, cfg: Config):
    corpus = Corpus.load(args.corpus, cfg.features.sample_rate)
    noise = Corpus.load(args.noise, cfg.features.sample_rate) if args.noise else None
    seed = 0 if args.seed is None else args.seed
    print(build_dataset(corpus, noise, args.n, seed, args.out, cfg.mix, workers=args.workers))


def cmd_train(args, cfg: Config):
    tcfg = _with_seed(cfg.train, args.seed)
    if args.max_steps is not None:
        tcfg = dataclasses.replace(tcfg, max_steps=args.max_steps)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(dataclasses.replace(cfg, train=tcfg), out / "config.ini")
    model = VelocityField(cfg.model, seed=tcfg.seed)
    result = train(args.manifest, model, tcfg, out, cfg.features)
    print(result.checkpoints[-1])


def _extract_one(model, enroll_path, mixed_path, scfg, cfg: Config, out: Path, vocoder):
    enroll = read_wav(enroll_path, cfg.features.sample_rate)
    mixed = read_wav(mixed_path, cfg.features.sample_rate)
    mel = extract(model, enroll, mixed, scfg, cfg.features)
    if out.suffix == ".wav":
        if vocoder is None:
            raise SystemExit("waveform output needs --vocoder (or write a .npz mel)")
        wav, _ = vocode(mel, stft(mixed, cfg.features.n_fft, cfg.features.hop), vocoder, len(mixed))
        write_wav(out, wav)
    else:
        save_mel(out, mel, cfg.features)


def cmd_extract(args, cfg: Config):
    scfg = _with_seed(cfg.sampler, args.seed)
    overrides = {k: v for k, v in (("n_steps", args.steps), ("cfg_scale", args.cfg), ("method", args.method)) if v is not None}
    scfg = dataclasses.replace(scfg, **overrides)
    model, _ = load_flow_model(args.ckpt, cfg.features)
    vocoder = load_vocoder(args.vocoder, cfg.features)[0] if args.vocoder else None
    if args.manifest:
        manifest = Path(args.manifest)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        suffix = ".wav" if vocoder is not None else ".npz"
        for row in read_manifest(manifest):
            _extract_one(
                model, manifest.parent / row["enrollment"], manifest.parent / row["mixed"],
                scfg, cfg, out_dir / f"{row['id']}{suffix}", vocoder,
            )
        print(out_dir)
    else:
        if not (args.mixed and args.enroll):
            raise SystemExit("extract needs --mixed and --enroll, or --manifest")
        _extract_one(model, args.enroll, args.mixed, scfg, cfg, Path(args.out), vocoder)
        print(args.out)


def cmd_train_vocoder(args, cfg: Config):
    vcfg = _with_seed(cfg.vocoder_train, args.seed)
    if args.steps is not None:
        vcfg = dataclasses.replace(vcfg, steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(dataclasses.replace(cfg, vocoder_train=vcfg), out / "config.ini")
    model = PhaseVocoder(cfg.vocoder, seed=vcfg.seed)
    train_vocoder(args.manifest, model, vcfg, out, cfg.features)
    print(out / "vocoder_final.pt")


def cmd_vocode(args, cfg: Config):
    model, _ = load_vocoder(args.ckpt, cfg.features)
    mel: MelSpectrogram = load_mel(args.mel, cfg.features)
    mixed = read_wav(args.mixed, cfg.features.sample_rate)
    wav, _ = vocode(mel, stft(mixed, cfg.features.n_fft, cfg.features.hop), model, len(mixed))
    write_wav(args.out, wav)
    print(args.out)


def cmd_eval(args, cfg: Config):
    seed = 0 if args.seed is None else args.seed
    report = evaluate(args.manifest, args.outputs, args.out, cfg.features, cfg, seed)
    for metric, stats in report.aggregate.items():
        print(f"{metric}: {stats['mean']:.3f} [{stats['ci95_low']:.3f}, {stats['ci95_high']:.3f}]")
    if report.missing:
        print(f"missing: {', '.join(report.missing)}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [features], [model], [train], [sampler], [vocoder] ...")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="speakerflow", description="Flow-matching target speaker extraction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-corpus", parents=[common], help="write a synthetic speech + noise corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--utterances", type=int, default=4)
    p.add_argument("--noise-clips", type=int, default=2)
    p.set_defaults(func=cmd_toy_corpus)

    p = sub.add_parser("mix", parents=[common], help="render a mixture dataset")
    p.add_argument("--corpus", required=True, help="speech corpus.jsonl")
    p.add_argument("--noise", help="noise corpus.jsonl")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", parents=[common], help="train the flow model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common], help="extract the target speaker")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mixed")
    p.add_argument("--enroll")
    p.add_argument("--manifest", help="extract every row; --out is then a directory")
    p.add_argument("--out", required=True, help="mel .npz, .wav (with --vocoder) or a directory")
    p.add_argument("--vocoder", help="vocoder checkpoint for waveform output")
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg", type=float)
    p.add_argument("--method", choices=["euler", "midpoint"])
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-vocoder", parents=[common], help="train the phase vocoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_vocoder)

    p = sub.add_parser("vocode", parents=[common], help="mel + mixture phase -> waveform")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mel", required=True)
    p.add_argument("--mixed", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocode)

    p = sub.add_parser("eval", parents=[common], help="score extracted waveforms")
    p.add_argument("--manifest", required=True)
    p.add_argument("--outputs", required=True, help="directory of <example_id>.wav")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    args.func(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
