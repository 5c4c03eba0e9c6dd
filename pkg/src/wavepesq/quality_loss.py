"""The trained scorer as a differentiable loss, an FIR enhancement demo, and correlation study."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import grad_engine as ge
from . import pesqnet
from .audio_io import atomic_write_bytes
from . import kernels
from .errors import ConfigInvalid, DegenerateInput, EmptyDataset, NotFound, ParseError, ShapeMismatch
from .metrics import pearson
from .pesqnet import SCORE_MAX, Model
from .training import TrainConfig, batch_stream, split_indices

MAXIMIZE_QUALITY = "maximize_quality"
PAPER_LITERAL = "paper_literal"
FIR_TAPS = 64
SCORE_CSV_HEADER = ("file_id", "segment_score", "full_score")

__all__ = [
    "CombinedLossConfig",
    "FirEnhancer",
    "combined_loss",
    "combined_loss_terms",
    "train_fir_enhancer",
    "pearson",
    "correlation_study",
]


@dataclass(frozen=True)
class CombinedLossConfig:
    lam: float = 1.0
    score_direction: str = MAXIMIZE_QUALITY

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigInvalid(f"lambda must lie in [0, 1], got {self.lam}")
        if self.score_direction not in (MAXIMIZE_QUALITY, PAPER_LITERAL):
            raise ConfigInvalid(f"unknown score_direction {self.score_direction!r}")


def _as_tensor(tape, x):
    if isinstance(x, ge.Tensor):
        return ge.reshape(x, (x.shape[-1],)) if x.value.ndim == 2 else x
    return tape.constant(np.asarray(x, dtype=np.float64))


def combined_loss_terms(tape: ge.Tape, model: Model, clean, enhanced, speaker: int, cfg: CombinedLossConfig,
                        bound=None):
    """Return ``(loss, perceptual_term, mse_term)`` tensors.

    ``maximize_quality``: ``(4.5 - P) + lam * MSE``. ``paper_literal``:
    ``P + lam * MSE``. The model is bound frozen, so only ``enhanced`` (and
    whatever produced it) receives gradient.
    """
    if bound is None:
        bound = pesqnet.bind(tape, model, trainable=False, prefix="scorer.")
    clean_t = _as_tensor(tape, clean)
    enh_t = _as_tensor(tape, enhanced)
    if clean_t.shape != enh_t.shape:
        raise ShapeMismatch(f"clean {clean_t.shape} vs enhanced {enh_t.shape}")
    score = pesqnet.forward_graph(tape, bound, model.config, clean_t, enh_t, speaker)
    if cfg.score_direction == MAXIMIZE_QUALITY:
        perceptual = ge.scale_shift(score, -1.0, SCORE_MAX)
    else:
        perceptual = score
    err = ge.mse(clean_t, enh_t)
    loss = ge.add(perceptual, ge.scale_shift(err, cfg.lam))
    return loss, perceptual, err


def combined_loss(tape: ge.Tape, model: Model, clean, enhanced, speaker: int, cfg: CombinedLossConfig) -> ge.Tensor:
    return combined_loss_terms(tape, model, clean, enhanced, speaker, cfg)[0]


@dataclass
class FirEnhancer:
    """Causal FIR filter; ``taps[j]`` multiplies ``x[t - j]``."""

    taps: np.ndarray = field(default_factory=lambda: identity_taps())

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        return kernels.conv_forward(x, self.kernel(), np.zeros(1), 1)[0]

    def kernel(self) -> np.ndarray:
        """Taps in conv1d_causal layout ``[1, 1, K]`` (index K-1 is lag 0)."""
        return self.taps[::-1].reshape(1, 1, -1).copy()

    @classmethod
    def from_kernel(cls, kernel) -> "FirEnhancer":
        return cls(np.asarray(kernel, dtype=np.float64).reshape(-1)[::-1].copy())


def identity_taps(n: int = FIR_TAPS) -> np.ndarray:
    taps = np.zeros(n)
    taps[0] = 1.0
    return taps


def fir_graph(tape, kernel: ge.Tensor, degraded) -> ge.Tensor:
    x = tape.constant(np.asarray(degraded, dtype=np.float64).reshape(1, -1))
    zero = tape.constant(np.zeros(1))
    return ge.reshape(ge.conv1d_causal(x, kernel, zero, 1), (x.shape[1],))


def _enhancement_metrics(model, fir, pairs):
    enhanced = [fir.apply(p.degraded) for p in pairs]
    mse = float(np.mean([np.mean((p.clean - e) ** 2) for p, e in zip(pairs, enhanced)]))
    score = float(np.mean([pesqnet.forward(model, p.clean, e, p.speaker) for p, e in zip(pairs, enhanced)]))
    return {"val_mse": mse, "mean_score": score}


def train_fir_enhancer(model: Model, pairs, cfg: CombinedLossConfig, tc: TrainConfig, log=None):
    """Train a 64-tap FIR on the combined loss through the frozen scorer.

    Pairs are split by ``tc.val_fraction`` (seeded); metrics are measured on
    the held-out part for the identity filter (``before``) and the trained
    one (``after``). Returns ``(FirEnhancer, {"before": ..., "after": ...})``.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyDataset("no pairs to train the enhancer on")
    train_idx, val_idx = split_indices(len(pairs), tc.val_fraction, tc.seed)
    train_set = [pairs[i] for i in train_idx] or [pairs[i] for i in val_idx]
    held_out = [pairs[i] for i in val_idx]

    fir = FirEnhancer()
    before = _enhancement_metrics(model, fir, held_out)
    params = {"fir.kernel": fir.kernel()}
    state = ge.AdamState()
    hyper = tc.adam
    batches = batch_stream(len(train_set), tc.batch_size, np.random.default_rng([tc.seed, 0xF1]))
    for step in range(1, tc.steps + 1):
        total = np.zeros_like(params["fir.kernel"])
        loss_sum = 0.0
        for i in next(batches):
            p = train_set[i]
            tape = ge.Tape()
            kernel = tape.parameter("fir.kernel", params["fir.kernel"])
            enhanced = fir_graph(tape, kernel, p.degraded)
            loss = combined_loss(tape, model, p.clean, enhanced, p.speaker, cfg)
            loss_sum += loss.item()
            total = total + tape.backward(loss)["fir.kernel"]
        ge.adam_step(params, {"fir.kernel": total / tc.batch_size}, state, hyper, step)
        if log is not None and step % 50 == 0:
            log(step, loss_sum / tc.batch_size)
    fir = FirEnhancer.from_kernel(params["fir.kernel"])
    after = _enhancement_metrics(model, fir, held_out)
    return fir, {"before": before, "after": after}


# --------------------------------------------------------------------------
# correlation study


def read_score_pairs(path):
    """Parse ``file_id,segment_score,full_score`` CSV into ``(ids, seg, full)``."""
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise NotFound(f"no such file: {path}") from exc
    if not rows or tuple(h.strip() for h in rows[0]) != SCORE_CSV_HEADER:
        raise ParseError(f"{path}: header must be {','.join(SCORE_CSV_HEADER)}")
    ids, seg, full = [], [], []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        try:
            seg.append(float(row[1]))
            full.append(float(row[2]))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        ids.append(row[0])
    return ids, np.array(seg), np.array(full)


def score_pairs_csv(ids, seg, full) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_CSV_HEADER)
    for i, s, f in zip(ids, seg, full):
        w.writerow([i, repr(float(s)), repr(float(f))])
    return buf.getvalue().encode("utf-8")


def correlation_study(score_pairs_path, scatter_path=None):
    """Pearson r between segment-level and full-file scores.

    Writes the parsed points to ``scatter_path`` (default ``scatter.csv``
    beside the input). Returns ``(r, n, scatter_path)``.
    """
    ids, seg, full = read_score_pairs(score_pairs_path)
    if len(ids) < 2:
        raise DegenerateInput("need at least two score rows")
    r = pearson(seg, full)
    if scatter_path is None:
        scatter_path = os.path.join(os.path.dirname(os.path.abspath(score_pairs_path)), "scatter.csv")
    atomic_write_bytes(scatter_path, score_pairs_csv(ids, seg, full))
    return r, len(ids), scatter_path
