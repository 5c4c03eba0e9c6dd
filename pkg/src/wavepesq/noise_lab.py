"""Speech-shaped noise by Fourier phase randomisation, and SNR-controlled mixing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio_io import AudioBuffer, segment_frames
from .errors import ConfigInvalid, EmptyCorpus, InputTooShort, NumericalFailure, ZeroPowerInput
from .spectral import fft, ifft, next_power_of_two

DEFAULT_SNRS_DB = (0.0, 5.0, 10.0, 15.0)
SSN_PEAK = 0.99
# SNR draws use a stream independent of the phase draws for the same seed
_SNR_STREAM = 0x534E52


def _ssn_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def phase_randomize(samples, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad to a power of two and replace every spectral phase with a uniform draw.

    Magnitudes are kept; bins 0 and N/2 get zero phase and the upper half is
    filled by conjugate symmetry, so the inverse transform is real. Returns
    the full length-N real signal (no cropping, no normalisation).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < 2:
        raise InputTooShort("phase randomisation needs at least 2 samples")
    n = next_power_of_two(x.shape[0])
    padded = np.zeros(n)
    padded[: x.shape[0]] = x
    mag = np.abs(fft(padded))
    half = n // 2
    phases = rng.uniform(0.0, 2.0 * np.pi, size=half - 1)
    spec = np.empty(n, dtype=np.complex128)
    spec[0] = mag[0]
    spec[half] = mag[half]
    spec[1:half] = mag[1:half] * np.exp(1j * phases)
    spec[half + 1 :] = np.conj(spec[1:half][::-1])
    out = ifft(spec)
    rms = np.sqrt(np.mean(out.real**2))
    if np.max(np.abs(out.imag)) >= 1e-9 * rms:
        raise NumericalFailure(
            f"imaginary residue {np.max(np.abs(out.imag)):.3e} exceeds 1e-9 x RMS {rms:.3e}"
        )
    return out.real.copy()


def make_ssn(corpus, out_len: int, seed: int) -> AudioBuffer:
    """Speech-shaped noise with the long-term spectrum of ``corpus``.

    The first ``out_len`` samples of the phase-randomised signal, peak
    normalised to 0.99.
    """
    x = corpus.samples if isinstance(corpus, AudioBuffer) else np.asarray(corpus, dtype=np.float64)
    if x.shape[0] < 2:
        raise InputTooShort("corpus must hold at least 2 samples")
    if not 1 <= out_len <= x.shape[0]:
        raise InputTooShort(f"out_len {out_len} must lie in [1, corpus length {x.shape[0]}]")
    noise = phase_randomize(x, _ssn_rng(seed))
    head = noise[:out_len]
    peak = np.max(np.abs(head))
    if peak == 0.0:
        raise NumericalFailure("phase-randomised noise is silent over the requested span")
    return AudioBuffer(head * (SSN_PEAK / peak))


def signal_power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def noise_gain(clean, noise, snr_db: float) -> float:
    p_clean = signal_power(clean)
    p_noise = signal_power(noise)
    if p_clean == 0.0:
        raise ZeroPowerInput("clean frame is silent")
    if p_noise == 0.0:
        raise ZeroPowerInput("noise frame is silent")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean, noise, snr_db: float) -> np.ndarray:
    """``clean + g * noise`` with ``g`` chosen so the mixture has the requested SNR."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ConfigInvalid(f"clean {clean.shape} and noise {noise.shape} lengths differ")
    return clean + noise_gain(clean, noise, snr_db) * noise


def measured_snr_db(clean, degraded) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    resid = np.asarray(degraded, dtype=np.float64) - clean
    return float(10.0 * np.log10(np.sum(clean * clean) / np.sum(resid * resid)))


@dataclass(frozen=True)
class DegradedPair:
    clean: np.ndarray
    degraded: np.ndarray
    snr_db: float
    source_id: str
    segment_index: int
    speaker: str = ""

    @property
    def clean_name(self) -> str:
        return f"{self.source_id}_{self.segment_index}_clean.wav"

    @property
    def degraded_name(self) -> str:
        return f"{self.source_id}_{self.segment_index}_deg.wav"


@dataclass
class DegradedPairSet:
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def degrade_corpus(files, snr_list_db=DEFAULT_SNRS_DB, frame_len: int = 4095, seed: int = 0,
                   speakers: dict | None = None) -> DegradedPairSet:
    """Cut every file into hop=frame_len segments and mix each with fresh SSN.

    ``files`` is a sequence of ``(file_id, AudioBuffer)``. One SSN buffer is
    synthesised from the concatenated corpus; segments consume contiguous
    slices of it, and an exhausted buffer is regenerated with seed+1, +2, ...
    Each segment draws its SNR uniformly from ``snr_list_db``. Segments with
    silent clean audio are skipped. When a mixture would leave [-1, 1] the
    clean/degraded pair is scaled jointly to a 0.99 peak (SNR unchanged).
    """
    snrs = [float(s) for s in snr_list_db]
    if not snrs:
        raise ConfigInvalid("snr_list must not be empty")
    if frame_len < 1:
        raise ConfigInvalid("frame_len must be >= 1")
    files = list(files)
    if not files:
        raise EmptyCorpus("no input files")
    speakers = speakers or {}
    corpus = np.concatenate([np.asarray(buf.samples) for _, buf in files])
    if corpus.shape[0] < 2 or not np.any(corpus):
        raise EmptyCorpus("corpus is empty or silent")

    noise_seed = int(seed)
    noise = make_ssn(corpus, corpus.shape[0], noise_seed).samples
    cursor = 0
    pick = np.random.default_rng([int(seed), _SNR_STREAM])

    out = []
    for file_id, buf in files:
        for idx, frame in enumerate(segment_frames(buf, frame_len, frame_len)):
            if not np.any(frame):
                continue
            snr = snrs[int(pick.integers(len(snrs)))]
            if cursor + frame_len > noise.shape[0]:
                noise_seed += 1
                noise = make_ssn(corpus, corpus.shape[0], noise_seed).samples
                cursor = 0
                if frame_len > noise.shape[0]:
                    raise InputTooShort("corpus shorter than one frame")
            chunk = noise[cursor : cursor + frame_len]
            cursor += frame_len
            clean = frame.copy()
            degraded = mix_at_snr(clean, chunk, snr)
            peak = max(np.max(np.abs(degraded)), np.max(np.abs(clean)))
            if peak > 1.0:
                clean *= 0.99 / peak
                degraded *= 0.99 / peak
            out.append(DegradedPair(clean, degraded, snr, file_id, idx, speakers.get(file_id, file_id)))
    return DegradedPairSet(out)
