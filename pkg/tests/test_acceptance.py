"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` (or ``python
tests/test_acceptance.py``) to see the lines as they happen; under a normal
``pytest`` run they are repeated in the terminal summary.
"""
import io
import math
import sys
import time

import numpy as np
import pytest

from wavepesq import cli, noise_lab, pesqnet, quality_loss as ql, spectral, synthetic, training
from wavepesq.errors import BadMagic, ChecksumMismatch, ParseError, VersionUnsupported
from wavepesq.metrics import pearson
from wavepesq.training import TrainConfig

RESULTS = []


def report(number, title, passed, detail):
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    RESULTS.append(line)
    print(line, file=sys.stderr)
    return passed


# ---------------------------------------------------------------- 1


def test_criterion_1_gradients():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, configs = 0.0, []
    for seed in range(20):
        layers, frame = int(rng.integers(1, 5)), int(rng.integers(1, 33))
        cfg = pesqnet.grad_check_config(layers, frame, seed)
        rep = pesqnet.gradient_check(cfg, seed, epsilon=1e-5, tolerance=1e-6)
        worst = max(worst, rep.max_rel_err)
        configs.append((layers, frame, rep.passed))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and all(p for *_, p in configs) and elapsed < 120
    assert report(1, "gradient check, 20 configs", ok, f"max_rel_err={worst:.3e}, {elapsed:.1f}s"), configs


# ---------------------------------------------------------------- 2


def test_criterion_2_receptive_field():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    mismatches = []
    for seed in range(10):
        cfg = pesqnet.ModelConfig(kernel_size=int(rng.integers(2, 5)), dilation_cycles=int(rng.integers(1, 3)),
                                  max_dilation_log2=int(rng.integers(0, 5)), residual_channels=3, skip_channels=3,
                                  speaker_count=1, speaker_embed_dim=2, frame_len=1)
        expected = pesqnet.receptive_field(cfg)
        probe = pesqnet.empirical_receptive_field(pesqnet.build(cfg, seed), length=expected + 16, strict=True)
        if probe.samples != expected:
            mismatches.append((cfg, probe.samples, expected))
    default = pesqnet.ModelConfig()
    rf = pesqnet.receptive_field(default)
    probe = pesqnet.empirical_receptive_field(pesqnet.build(default, 0), length=rf + 64, strict=True)
    elapsed = time.perf_counter() - t0
    ok = not mismatches and rf == 8191 and rf >= 8190 and probe.samples == rf and elapsed < 60
    assert report(2, "receptive field", ok, f"default={rf}, empirical={probe.samples}, {elapsed:.1f}s"), mismatches


# ---------------------------------------------------------------- 3


def test_criterion_3_speech_shaped_noise():
    t0 = time.perf_counter()
    speech = np.concatenate([buf.samples for _, _, buf in synthetic.synthetic_corpus(3, 2, 2.0, 21)])
    noise = noise_lab.phase_randomize(speech, np.random.default_rng(1))
    n = spectral.next_power_of_two(len(speech))
    padded = np.zeros(n)
    padded[: len(speech)] = speech
    ref = np.abs(np.fft.fft(padded))
    got = np.abs(np.fft.fft(noise))
    active = ref > 1e-12 * ref.max()
    mag_err = float(np.max(np.abs(got - ref)[active] / ref[active]))
    e0 = float(np.sum(speech**2))
    energy_err = abs(float(np.sum(noise**2)) - e0) / e0

    ssn = noise_lab.make_ssn(speech, 10 * 16000, seed=4).samples
    corpus_db = spectral.ltas(speech).band_power_db
    ssn_db = spectral.ltas(ssn).band_power_db
    offset = 10 * np.log10(np.mean(speech**2) / np.mean(ssn**2))
    in_range = corpus_db >= corpus_db.max() - 40.0
    ltas_err = float(np.max(np.abs(ssn_db + offset - corpus_db)[in_range]))
    elapsed = time.perf_counter() - t0
    ok = mag_err < 1e-6 and energy_err < 1e-9 and ltas_err <= 3.0 and elapsed < 60
    assert report(3, "speech-shaped noise", ok,
                  f"mag={mag_err:.2e}, parseval={energy_err:.2e}, ltas={ltas_err:.2f}dB, {elapsed:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_snr_mixing():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    corpus = np.concatenate([buf.samples for _, _, buf in synthetic.synthetic_corpus(2, 1, 1.0, 3)])
    ssn = noise_lab.make_ssn(corpus, len(corpus), seed=2).samples
    worst = 0.0
    for _ in range(100):
        frame = int(rng.integers(16, 4096))
        snr = float(rng.uniform(-10.0, 30.0))
        start = int(rng.integers(0, len(corpus) - frame))
        clean = corpus[start : start + frame]
        mixed = noise_lab.mix_at_snr(clean, ssn[start : start + frame], snr)
        worst = max(worst, abs(noise_lab.measured_snr_db(clean, mixed) - snr))
    elapsed = time.perf_counter() - t0
    ok = worst < 0.01 and elapsed < 10
    assert report(4, "SNR mixing, 100 cases", ok, f"max_err={worst:.2e}dB, {elapsed:.2f}s")


# ---------------------------------------------------------------- 5 and 6


@pytest.fixture(scope="module")
def desk_model():
    """Criterion 5's run; criterion 6 reuses the trained model."""
    t0 = time.perf_counter()
    corpus = synthetic.synthetic_corpus(4, 4, 4.0, 0)
    pairs = noise_lab.degrade_corpus([(f, b) for f, _, b in corpus], frame_len=512, seed=1,
                                     speakers={f: s for f, s, _ in corpus})
    speakers = sorted({s for _, s, _ in corpus})
    train_set, val_set = training.assemble_dataset(pairs, "proxy", {s: i for i, s in enumerate(speakers)}, seed=2)
    model = pesqnet.build(pesqnet.reduced_config(512, len(speakers)), 3, speakers)
    tc = TrainConfig(steps=2000, seed=4, learning_rate=1e-2)
    trained, history = training.train(model, (train_set, val_set), tc)
    mse, r = training.evaluate(trained, val_set)
    return {"model": trained, "pairs": len(pairs), "val": val_set, "mse": mse, "r": r,
            "elapsed": time.perf_counter() - t0, "history": history}


@pytest.mark.slow
def test_criterion_5_desk_training(desk_model):
    var = float(np.var([p.score for p in desk_model["val"]]))
    mse, r, elapsed = desk_model["mse"], desk_model["r"], desk_model["elapsed"]
    ok = desk_model["pairs"] == 2000 and mse < var and r >= 0.8 and elapsed < 600
    assert report(5, "desk-scale training", ok,
                  f"pairs={desk_model['pairs']}, val_mse={mse:.4f} vs var={var:.4f}, r={r:.4f}, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_6_enhancement(desk_model):
    t0 = time.perf_counter()
    corpus = synthetic.synthetic_corpus(4, 1, 4.0, 11)
    speakers = {s: i for i, s in enumerate(desk_model["model"].speaker_names)}
    pairs = noise_lab.degrade_corpus([(f, b) for f, _, b in corpus], [5.0], frame_len=512, seed=5,
                                     speakers={f: s for f, s, _ in corpus})
    data = [training.SegmentPair(p.clean, p.degraded, speakers[p.speaker], training.proxy_score(p.clean, p.degraded))
            for p in pairs]
    tc = TrainConfig(steps=1000, seed=3, learning_rate=1e-3, val_fraction=0.2)
    _, rep = ql.train_fir_enhancer(desk_model["model"], data, ql.CombinedLossConfig(lam=1.0), tc)
    elapsed = time.perf_counter() - t0
    b, a = rep["before"], rep["after"]
    ok = a["val_mse"] < b["val_mse"] and a["mean_score"] > b["mean_score"] and elapsed < 600
    assert report(6, "FIR enhancement demo", ok,
                  f"mse {b['val_mse']:.5f}->{a['val_mse']:.5f}, score {b['mean_score']:.3f}->{a['mean_score']:.3f}, "
                  f"{elapsed:.0f}s")


# ---------------------------------------------------------------- 7


def test_criterion_7_checkpoints(tmp_path):
    cfg = pesqnet.reduced_config(64, 3, max_dilation_log2=5)
    model = pesqnet.build(cfg, 8, ["a", "b", "c"])
    path = tmp_path / "m.ckpt"
    training.save_checkpoint(model, path)
    loaded = training.load_checkpoint(path)
    rng = np.random.default_rng(7)
    exact = True
    for _ in range(10):
        c, d = rng.uniform(-1, 1, 64), rng.uniform(-1, 1, 64)
        s = int(rng.integers(3))
        exact &= pesqnet.forward(model, c, d, s) == pesqnet.forward(loaded, c, d, s)

    data = path.read_bytes()
    rejected = 0
    corruptions = [b"XXXX" + data[4:], data[:-1], data[: len(data) // 2],
                   data[:100] + bytes([data[100] ^ 1]) + data[101:], data[:-4] + b"\0\0\0\0"]
    for bad in corruptions:
        bad_path = tmp_path / "bad.ckpt"
        bad_path.write_bytes(bad)
        try:
            training.load_checkpoint(bad_path)
        except (BadMagic, ChecksumMismatch, ParseError, VersionUnsupported):
            rejected += 1
    ok = exact and rejected == len(corruptions)
    assert report(7, "checkpoint roundtrip", ok, f"exact={exact}, rejected {rejected}/{len(corruptions)}")


# ---------------------------------------------------------------- 8


def test_criterion_8_determinism(tmp_path):
    from test_cli import run_pipeline, tree_bytes

    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    ta, tb = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    same_ckpt = ta["m.ckpt"] == tb["m.ckpt"]
    same_files = ta.keys() == tb.keys() and all(ta[k] == tb[k] for k in ta)
    ok = same_ckpt and same_files and a == b
    assert report(8, "pipeline determinism", ok,
                  f"checkpoint identical={same_ckpt}, {len(ta)} files identical={same_files}, metrics identical={a == b}")


# ---------------------------------------------------------------- 9


def _oracle_r(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_criterion_9_correlation(tmp_path):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 300))
        x = rng.normal(3, 1, n)
        y = 0.6 * x + rng.normal(0, 1, n)
        worst = max(worst, abs(pearson(x, y) - _oracle_r(x.tolist(), y.tolist())))
    x = rng.uniform(1, 4.5, 100)
    identities = pearson(x, 2 * x + 1) == 1.0 and pearson(x, -0.5 * x + 4) == -1.0

    seg, full = synthetic.correlated_scores(200, 0.81, seed=12)
    csv_path = tmp_path / "scores.csv"
    csv_path.write_bytes(ql.score_pairs_csv([f"f{i}" for i in range(200)], seg, full))
    r, n, _ = ql.correlation_study(csv_path)
    out, err = io.StringIO(), io.StringIO()
    code = cli.run_cli(["corr-study", "--scores", str(csv_path)], out, err)
    cli_line = out.getvalue().splitlines()[0] if code == 0 else err.getvalue()
    ok = worst < 1e-12 and identities and abs(r - 0.81) < 1e-9 and cli_line == "pearson_r=0.810000"
    assert report(9, "correlation harness", ok,
                  f"oracle_err={worst:.1e}, identities={identities}, study_r_err={abs(r - 0.81):.1e}, cli '{cli_line}'")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
