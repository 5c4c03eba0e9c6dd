"""Radix-2 FFT and long-term average spectrum (Welch) estimation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .audio_io import AudioBuffer, segment_frames
from .errors import InputTooShort, NonPowerOfTwoLength

DB_FLOOR = -120.0


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


def fft(signal, inverse: bool = False) -> np.ndarray:
    """Discrete Fourier transform of a power-of-two-length sequence.

    The inverse transform carries the ``1/N`` factor, so
    ``fft(fft(x), inverse=True)`` recovers ``x``.
    """
    a = np.array(signal, dtype=np.complex128, copy=True).reshape(-1)
    n = a.shape[0]
    if not is_power_of_two(n):
        raise NonPowerOfTwoLength(f"length {n} is not a power of two")
    kernels.fft_inplace(a, inverse)
    if inverse:
        a /= n
    return a


def ifft(spectrum) -> np.ndarray:
    return fft(spectrum, inverse=True)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class BandSpectrum:
    band_power_db: np.ndarray
    frame_len: int
    hop: int


def ltas(buf, frame_len: int = 512, hop: int = 256) -> BandSpectrum:
    """Welch long-term average spectrum in dB, bins ``0..frame_len/2``.

    Power per bin is ``|FFT(w * frame)|^2 / sum(w^2)`` averaged over frames,
    floored at -120 dB.
    """
    x = buf.samples if isinstance(buf, AudioBuffer) else np.asarray(buf, dtype=np.float64)
    if not is_power_of_two(frame_len):
        raise NonPowerOfTwoLength(f"frame_len {frame_len} is not a power of two")
    if x.shape[0] < frame_len:
        raise InputTooShort(f"need at least {frame_len} samples, got {x.shape[0]}")
    frames = segment_frames(x, frame_len, hop)
    win = hann(frame_len)
    norm = np.sum(win * win)
    n_bins = frame_len // 2 + 1
    acc = np.zeros(n_bins)
    for frame in frames:
        spec = fft(frame * win)[:n_bins]
        acc += spec.real**2 + spec.imag**2
    power = acc / (frames.shape[0] * norm)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(power)
    return BandSpectrum(np.maximum(db, DB_FLOOR), frame_len, hop)
