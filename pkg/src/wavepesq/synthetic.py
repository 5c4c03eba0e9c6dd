"""Seeded synthetic stand-ins for a speech corpus and for external score files.

Nothing here claims to be speech; the signals are harmonic, vowel-like and
spectrally coloured, which is enough to exercise noise synthesis, mixing
and the regressor end to end.
"""
from __future__ import annotations

import numpy as np

from .audio_io import SAMPLE_RATE, AudioBuffer


def speech_like(duration_s: float, seed: int, f0: float | None = None, rms: float = 0.1,
                sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Harmonic "vowel" sequence with drifting pitch and formants.

    Syllables last 150-300 ms; each has its own two formants, pitch offset
    and level (within +/-2 dB), crossfaded by linear interpolation.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    base_f0 = float(rng.uniform(100.0, 240.0)) if f0 is None else float(f0)

    # syllable anchor points
    centers = [0.0]
    while centers[-1] < n:
        centers.append(centers[-1] + rng.uniform(0.15, 0.30) * sample_rate)
    centers = np.asarray(centers)
    k = centers.shape[0]
    f0_track = base_f0 * (1.0 + rng.uniform(-0.08, 0.08, k))
    f1 = rng.uniform(300.0, 800.0, k)
    f2 = rng.uniform(900.0, 2300.0, k)
    level = 10.0 ** (rng.uniform(-2.0, 2.0, k) / 20.0)

    t = np.arange(n, dtype=np.float64)
    inst_f0 = np.interp(t, centers, f0_track)
    phase = 2.0 * np.pi * np.cumsum(inst_f0) / sample_rate
    f1_t = np.interp(t, centers, f1)
    f2_t = np.interp(t, centers, f2)
    lvl_t = np.interp(t, centers, level)

    n_harm = int(7000.0 // (base_f0 * 1.08))
    out = np.zeros(n)
    offsets = rng.uniform(0.0, 2.0 * np.pi, n_harm)
    for h in range(1, n_harm + 1):
        freq = h * inst_f0
        env = (1.0 / (1.0 + ((freq - f1_t) / 120.0) ** 2)
               + 0.6 / (1.0 + ((freq - f2_t) / 180.0) ** 2)
               + 0.02 * (500.0 / np.maximum(freq, 500.0)))
        out += env * np.sin(h * phase + offsets[h - 1])
    out += 0.01 * rng.standard_normal(n) * np.std(out)
    out *= lvl_t
    out *= rms / np.sqrt(np.mean(out * out))
    peak = np.max(np.abs(out))
    if peak > 0.95:
        out *= 0.95 / peak
    return AudioBuffer(out, sample_rate)


def synthetic_corpus(n_speakers: int, files_per_speaker: int, duration_s: float, seed: int,
                     rms: float = 0.25):
    """List of ``(file_id, speaker, AudioBuffer)``; ids look like ``spk0_utt1``.

    The default level is loud (peaks near full scale): the regressor's input
    projection starts with O(1) weights, so quiet input leaves the energy cue
    buried under the bias terms.
    """
    rng = np.random.default_rng([seed, 7])
    speaker_f0 = rng.uniform(100.0, 240.0, n_speakers)
    out = []
    for s in range(n_speakers):
        for u in range(files_per_speaker):
            buf = speech_like(duration_s, seed=int(seed) * 1000 + s * 100 + u, f0=speaker_f0[s], rms=rms)
            out.append((f"spk{s}_utt{u}", f"spk{s}", buf))
    return out


def correlated_scores(n: int, r: float, seed: int):
    """Two score vectors whose sample Pearson correlation is exactly ``r`` (up to rounding).

    Built from a standardised ``x`` and a residual made orthogonal to it,
    then mapped affinely into a MOS-like range.
    """
    if not -1.0 <= r <= 1.0:
        raise ValueError("r must lie in [-1, 1]")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x -= x.mean()
    x /= np.sqrt(np.sum(x * x))
    e = rng.standard_normal(n)
    e -= e.mean()
    e -= np.dot(e, x) * x
    e /= np.sqrt(np.sum(e * e))
    y = r * x + np.sqrt(max(0.0, 1.0 - r * r)) * e
    return 2.5 + 3.0 * x, 2.5 + 4.0 * y
