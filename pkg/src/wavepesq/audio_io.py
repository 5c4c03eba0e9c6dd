"""16 kHz mono PCM16 WAV reading/writing and fixed-length segmentation."""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import IoError, MalformedWav, NotFound, SilentInput, UnsupportedFormat

SAMPLE_RATE = 16000
FRAME_LEN = 4095


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("AudioBuffer samples must be one-dimensional")
        if arr.size and (not np.all(np.isfinite(arr)) or np.max(np.abs(arr)) > 1.0):
            raise ValueError("AudioBuffer samples must lie in [-1, 1]")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return self.samples.shape[0]


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) != size:
            raise MalformedWav(f"chunk {cid!r} truncated: expected {size} bytes, got {len(body)}")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> AudioBuffer:
    """Read a PCM16 / mono / 16 kHz WAV file.

    Samples are ``int16 / 32768``. Other channel counts, bit depths and
    rates raise :class:`UnsupportedFormat` naming the offending field.
    """
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise NotFound(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoError(str(exc)) from exc

    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWav(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedWav(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data" and pcm is None:
            pcm = body
    if fmt is None:
        raise MalformedWav(f"{path}: missing fmt chunk")
    if pcm is None:
        raise MalformedWav(f"{path}: missing data chunk")

    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise UnsupportedFormat(f"{path}: audio format {audio_format} (only PCM=1 supported)")
    if channels != 1:
        raise UnsupportedFormat(f"{path}: channels={channels} (only mono supported)")
    if bits != 16:
        raise UnsupportedFormat(f"{path}: bits_per_sample={bits} (only 16 supported)")
    if rate != SAMPLE_RATE:
        raise UnsupportedFormat(f"{path}: sample_rate={rate} (only {SAMPLE_RATE} supported)")
    if len(pcm) % 2:
        raise MalformedWav(f"{path}: odd data chunk size {len(pcm)}")

    ints = np.frombuffer(pcm, dtype="<i2")
    return AudioBuffer(ints.astype(np.float64) / 32768.0, SAMPLE_RATE)


def quantize(samples) -> np.ndarray:
    """``round(s * 32767)`` with halves away from zero, clamped to int16."""
    scaled = np.asarray(samples, dtype=np.float64) * 32767.0
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, -32768, 32767).astype("<i2")


def wav_bytes(buf: AudioBuffer) -> bytes:
    pcm = quantize(buf.samples).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(pcm),
        b"WAVE",
        b"fmt ",
        16,
        1,
        1,
        buf.sample_rate_hz,
        buf.sample_rate_hz * 2,
        2,
        16,
        b"data",
        len(pcm),
    )
    return header + pcm


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a sibling temp file and rename, so failures leave nothing behind."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_wav(path, buf: AudioBuffer) -> None:
    """Write a canonical 44-byte-header PCM16 mono WAV."""
    atomic_write_bytes(path, wav_bytes(buf))


def segment_frames(samples, frame_len: int, hop: int) -> np.ndarray:
    """Cut ``[n_frames, frame_len]`` frames starting at multiples of ``hop``.

    The tail remainder is dropped; inputs shorter than one frame give an
    empty ``(0, frame_len)`` array.
    """
    if frame_len < 1 or hop < 1:
        raise ValueError("frame_len and hop must be >= 1")
    x = samples.samples if isinstance(samples, AudioBuffer) else np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    if n < frame_len:
        return np.empty((0, frame_len))
    count = (n - frame_len) // hop + 1
    idx = np.arange(count)[:, None] * hop + np.arange(frame_len)[None, :]
    return x[idx]


def peak_normalize(buf: AudioBuffer, target_peak: float = 0.99) -> AudioBuffer:
    if not 0.0 < target_peak <= 1.0:
        raise ValueError("target_peak must lie in (0, 1]")
    peak = np.max(np.abs(buf.samples)) if len(buf) else 0.0
    if peak == 0.0:
        raise SilentInput("cannot peak-normalize an all-zero buffer")
    out = buf.samples * (target_peak / peak)
    # guard against 1 ulp overshoot past the [-1, 1] invariant
    np.clip(out, -1.0, 1.0, out=out)
    return AudioBuffer(out, buf.sample_rate_hz)
