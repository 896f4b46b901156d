"""Acceptance criteria 1-9, each at its stated tolerance.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints one PASS/FAIL line per criterion.
"""

import time

import numpy as np
import pytest
import torch
from scipy import stats
from scipy.linalg import expm

from speakerflow.cfm import cfm_loss, load_items, make_path_sample, train
from speakerflow.config import (
    MixConfig,
    ModelConfig,
    SamplerConfig,
    ToyCorpusConfig,
    TrainConfig,
    VocoderConfig,
    VocoderTrainConfig,
)
from speakerflow.dsp import Waveform, istft, log_mel, mix_at_snr, si_sdr, snr_db, stft
from speakerflow.mixing import (
    Corpus,
    build_dataset,
    example_seed,
    load_example_stems,
    read_manifest,
    sample_mixture,
    synthetic_noise_corpus,
    synthetic_toy_corpus,
)
from speakerflow.model import VelocityField
from speakerflow.sampler import extract, integrate_field
from speakerflow.vocoder import PhaseVocoder, evaluate_items, load_vocoder_items, train_vocoder, vocode

# flow overfit run (criterion 6)
OVERFIT_STEPS = 3000
OVERFIT_LR = 2e-3
OVERFIT_UTTERANCES = ToyCorpusConfig(min_duration_s=0.8, max_duration_s=1.0)
OVERFIT_SAMPLER = SamplerConfig()

# vocoder overfit run (criterion 7)
VOCODER_STEPS = 200


def note(request, text):
    request.node.user_properties.append(("detail", text))


def test_criterion_1_dsp(request):
    rng = np.random.default_rng(2024)
    worst_rt = 0.0
    for _ in range(100):
        n = int(rng.integers(4096, 48000))
        w = Waveform(rng.standard_normal(n) * rng.uniform(0.01, 1.0))
        back = istft(stft(w), n).samples
        worst_rt = max(worst_rt, float(np.max(np.abs(back - w.samples)[1024:-1024])))

    worst_snr = 0.0
    for snr in (-5.0, 0.0, 5.0):
        for _ in range(20):
            s = rng.standard_normal(12000)
            i = rng.standard_normal(12000) * rng.uniform(0.1, 10)
            _, scale = mix_at_snr(Waveform(s), Waveform(i), snr)
            worst_snr = max(worst_snr, abs(snr_db(s, scale * i) - snr))

    worst_scale = 0.0
    for _ in range(100):
        ref = Waveform(rng.standard_normal(8000))
        est = Waveform(ref.samples + rng.standard_normal(8000) * rng.uniform(0.1, 2))
        base = si_sdr(est, ref)
        for a in (1e-3, 0.5, 7.0, -3.0):
            worst_scale = max(worst_scale, abs(si_sdr(Waveform(a * est.samples), ref) - base))
            worst_scale = max(worst_scale, abs(si_sdr(est, Waveform(a * ref.samples)) - base))

    note(request, f"round-trip {worst_rt:.2e}, SNR err {worst_snr:.2e} dB, SI-SDR scale err {worst_scale:.2e} dB")
    assert worst_rt < 1e-6
    assert worst_snr < 1e-9
    assert worst_scale < 1e-9


def test_criterion_2_path_and_loss(request):
    g = torch.Generator().manual_seed(0)
    x1 = torch.randn(12, 10, generator=g, dtype=torch.float64)
    s0 = make_path_sample(x1, 0.0, torch.Generator().manual_seed(1))
    s1 = make_path_sample(x1, 1.0, torch.Generator().manual_seed(1))
    assert torch.equal(s0.xt, s0.x0) and torch.equal(s1.xt, x1)

    s = make_path_sample(x1, 0.37, torch.Generator().manual_seed(2))
    pred = torch.randn(12, 10, generator=g, dtype=torch.float64).requires_grad_(True)
    mask = torch.rand(12, generator=g) < 0.6
    mask[0] = True
    loss = cfm_loss(pred, s, mask)
    p, tgt, m = pred.detach().numpy(), s.target.numpy(), mask.numpy()
    total, count = 0.0, 0
    for i in range(12):
        if m[i]:
            for j in range(10):
                total += (p[i, j] - tgt[i, j]) ** 2
                count += 1
    oracle_err = abs(loss.item() - total / count)

    loss.backward()
    h = 1e-6
    fd_err = 0.0
    for i, j in [(0, 0), (int(np.flatnonzero(m)[-1]), 9), (3, 4), (7, 2), (11, 5)]:
        up, down = pred.detach().clone(), pred.detach().clone()
        up[i, j] += h
        down[i, j] -= h
        fd = (cfm_loss(up, s, mask) - cfm_loss(down, s, mask)).item() / (2 * h)
        fd_err = max(fd_err, abs(fd - pred.grad[i, j].item()))

    note(request, f"oracle err {oracle_err:.1e}, grad FD err {fd_err:.1e}")
    assert oracle_err < 1e-12
    assert fd_err < 1e-6


def randomize(model, g, std):
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model


def test_criterion_3_mask_causality(request):
    torch.use_deterministic_algorithms(True)
    cfg = ModelConfig()
    rng = np.random.default_rng(3)
    g = torch.Generator().manual_seed(3)
    failures = 0
    try:
        for draw in range(20):
            model = randomize(VelocityField(cfg), g, std=float(rng.uniform(0.02, 0.2)))
            t_e, t_m = int(rng.integers(1, 80)), int(rng.integers(1, 80))
            n = t_e + t_m
            x = torch.randn(1, n, cfg.mel_dim, generator=g)
            c = torch.randn(1, n, cfg.mel_dim, generator=g)
            t = torch.rand(1, generator=g)
            te = torch.tensor([t_e])
            x2, c2 = x.clone(), c.clone()
            x2[:, t_e:] += torch.randn(1, t_m, cfg.mel_dim, generator=g)
            c2[:, t_e:] = torch.randn(1, t_m, cfg.mel_dim, generator=g) * 3
            with torch.no_grad():
                a = model(x, c, t, te)[0, :t_e]
                b = model(x2, c2, t, te)[0, :t_e]
                moved = model(x2, c2, t, te)[0, t_e:] - model(x, c, t, te)[0, t_e:]
            if not torch.equal(a, b) or not torch.any(moved != 0):
                failures += 1
    finally:
        torch.use_deterministic_algorithms(False)
    note(request, f"{20 - failures}/20 draws bit-identical on the enrollment region")
    assert failures == 0


def test_criterion_4_gradient_check(request):
    cfg = ModelConfig(n_layers=2, n_heads=2, embed_dim=16, ff_dim=32, mel_dim=8)
    g = torch.Generator().manual_seed(4)
    model = randomize(VelocityField(cfg).double(), g, std=0.2)
    t_e, t_m = 4, 5
    x = torch.randn(2, t_e + t_m, 8, generator=g, dtype=torch.float64)
    c = torch.randn(2, t_e + t_m, 8, generator=g, dtype=torch.float64)
    t = torch.tensor([0.3, 0.8], dtype=torch.float64)
    te = torch.tensor([t_e, t_e])
    w = torch.randn(x.shape, generator=g, dtype=torch.float64)

    def objective():
        return (model(x, c, t, te) * w).sum()

    model.zero_grad()
    objective().backward()
    params = dict(model.named_parameters())
    names = sorted(params)
    rng = np.random.default_rng(4)
    worst, h = 0.0, 1e-6
    for _ in range(50):
        p = params[names[rng.integers(len(names))]]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = objective().item()
            p[idx] = orig - h
            down = objective().item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    note(request, f"max relative error {worst:.2e} over 50 parameters")
    assert worst < 1e-4


def test_criterion_5_solver_orders(request):
    rng = np.random.default_rng(5)
    a = rng.standard_normal((6, 6))
    a -= (np.max(np.real(np.linalg.eigvals(a))) + 0.5) * np.eye(6)
    x0 = torch.as_tensor(rng.standard_normal(6))
    exact = expm(a) @ x0.numpy()
    at = torch.as_tensor(a)
    steps = [8, 16, 32, 64, 128]
    slopes = {}
    for method in ("euler", "midpoint"):
        errs = [np.max(np.abs(integrate_field(lambda x, t: at @ x, x0, n, method).numpy() - exact)) for n in steps]
        slopes[method] = -np.polyfit(np.log(steps), np.log(errs), 1)[0]
    note(request, f"euler slope {slopes['euler']:.3f}, midpoint slope {slopes['midpoint']:.3f}")
    assert abs(slopes["euler"] - 1.0) <= 0.3
    assert abs(slopes["midpoint"] - 2.0) <= 0.3


@pytest.fixture(scope="module")
def overfit_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    speech = synthetic_toy_corpus(2, 4, root / "speech", seed=0, cfg=OVERFIT_UTTERANCES, f0s=[150.0, 230.0])
    noise = synthetic_noise_corpus(2, root / "noise", seed=0)
    return build_dataset(Corpus.load(speech), Corpus.load(noise), 8, 0, root / "mix")


@pytest.mark.slow
def test_criterion_6_flow_overfit(request, overfit_set, tmp_path):
    items = load_items(overfit_set)
    model = VelocityField(ModelConfig(), seed=0)
    start = time.time()
    result = train(items, model, TrainConfig(lr_peak=OVERFIT_LR, max_steps=OVERFIT_STEPS, ckpt_every=0, seed=0))
    train_s = time.time() - start
    loss_ratio = float(np.mean(result.losses[-50:]) / result.losses[0])

    mae, base = [], []
    for row, item in zip(read_manifest(overfit_set), items):
        stems = load_example_stems(row, overfit_set.parent)
        mel = extract(model, stems["enrollment"], stems["mixed"], OVERFIT_SAMPLER)
        mae.append(float(np.mean(np.abs(mel.frames - item.target_mel))))
        base.append(float(np.mean(np.abs(item.mixed_mel - item.target_mel))))
    mae_ratio = sum(mae) / sum(base)
    note(
        request,
        f"{OVERFIT_STEPS} steps in {train_s:.0f}s; loss ratio {loss_ratio:.3f}; "
        f"mel MAE ratio {mae_ratio:.3f} (per item {np.round(np.divide(mae, base), 3).tolist()})",
    )
    assert OVERFIT_STEPS <= 5000
    assert loss_ratio < 0.10
    assert mae_ratio < 0.10


@pytest.mark.slow
def test_criterion_7_vocoder(request, tmp_path):
    speech = synthetic_toy_corpus(2, 3, tmp_path / "speech", seed=1, cfg=ToyCorpusConfig(1.0, 1.3))
    noise = synthetic_noise_corpus(2, tmp_path / "noise", seed=1)
    manifest = build_dataset(Corpus.load(speech), Corpus.load(noise), 4, 0, tmp_path / "mix")
    items = load_vocoder_items(manifest)

    model = PhaseVocoder(VocoderConfig(), seed=0)
    passthrough = 0.0
    for row in read_manifest(manifest):
        stems = load_example_stems(row, manifest.parent)
        s_m = stft(stems["mixed"])
        out, _ = vocode(log_mel(stems["target"]), s_m, model, len(stems["mixed"]))
        passthrough = max(passthrough, float(np.max(np.abs(out.samples - istft(s_m, len(stems["mixed"])).samples))))

    baseline = [
        si_sdr(istft(stft(load_example_stems(r, manifest.parent)["mixed"]), len(it.clean)), Waveform(it.clean))
        for r, it in zip(read_manifest(manifest), items)
    ]
    train_vocoder(items, model, VocoderTrainConfig(steps=VOCODER_STEPS, batch_size=4, ckpt_every=0))
    after = evaluate_items(model, items)
    gains = np.subtract(after, baseline)
    note(request, f"pass-through err {passthrough:.1e}; SI-SDR gain per item {np.round(gains, 2).tolist()} dB")
    assert passthrough < 1e-6
    assert np.all(gains >= 5.0)


def test_criterion_8_protocol_statistics(request, corpus, noise_corpus):
    n = 10_000
    cfg = MixConfig()
    snrs, with_noise = np.empty(n), np.empty(n, dtype=bool)
    snr_err = 0.0
    for i in range(n):
        ex = sample_mixture(corpus, noise_corpus, example_seed(8, i), cfg)
        snrs[i] = ex.speech_snr_db
        with_noise[i] = ex.noise is not None
        if i % 500 == 0:
            snr_err = max(snr_err, abs(snr_db(ex.target.samples, ex.interferer.samples) - ex.speech_snr_db))
    rate = float(with_noise.mean())
    ks = stats.kstest(snrs, stats.uniform(loc=-5, scale=10).cdf).statistic
    note(request, f"noise rate {rate:.4f}, KS {ks:.4f}, realised-SNR err {snr_err:.1e} dB")
    assert 0.73 <= rate <= 0.77
    assert ks < 0.02
    assert snr_err < 1e-9


def test_criterion_9_cli_determinism(request, tmp_path):
    from test_cli import DETERMINISTIC_FILES, pipeline

    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    differing = [f for f in DETERMINISTIC_FILES if (a / f).read_bytes() != (b / f).read_bytes()]
    note(request, f"{len(DETERMINISTIC_FILES) - len(differing)}/{len(DETERMINISTIC_FILES)} artifacts byte-identical")
    assert not differing, differing
