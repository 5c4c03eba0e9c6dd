"""Labelled datasets, supervised training of the regressor, and checkpoints."""
from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import grad_engine as ge
from . import pesqnet
from .audio_io import atomic_write_bytes
from .errors import (
    BadMagic,
    ChecksumMismatch,
    ConfigInvalid,
    DegenerateLabels,
    DuplicateKey,
    EmptyDataset,
    IoError,
    MissingLabel,
    NotFound,
    ParseError,
    ScoreOutOfRange,
    UnknownSpeaker,
    VersionUnsupported,
    ZeroPowerInput,
)
from .metrics import mean_squared_error, pearson
from .pesqnet import SCORE_MAX, SCORE_MIN, Model, ModelConfig

LABEL_KEYS = ("clean", "degraded", "speaker", "segment_index", "score")
VAL_EVERY = 50
MONITOR_PAIRS = 256


def proxy_score(clean, degraded) -> float:
    """Logistic map of segment SNR into [1, 4.5]; a self-contained label source.

    ``1 + 3.5 * sigmoid((snr_db - 5) / 4)``, and exactly 4.5 when the
    residual is zero.
    """
    clean = np.asarray(clean, dtype=np.float64)
    degraded = np.asarray(degraded, dtype=np.float64)
    if clean.shape != degraded.shape:
        raise ConfigInvalid("clean and degraded lengths differ")
    e_clean = float(np.sum(clean * clean))
    if e_clean == 0.0:
        raise ZeroPowerInput("clean frame is silent")
    resid = clean - degraded
    e_resid = float(np.sum(resid * resid))
    if e_resid == 0.0:
        return 4.5
    snr_db = 10.0 * math.log10(e_clean / e_resid)
    return 1.0 + 3.5 / (1.0 + math.exp(-(snr_db - 5.0) / 4.0))


# --------------------------------------------------------------------------
# labels


@dataclass(frozen=True)
class LabelRecord:
    clean: str
    degraded: str
    speaker: str
    segment_index: int
    score: float

    @property
    def key(self):
        return (os.path.basename(self.clean), self.segment_index)


def _check_score(score, where):
    if not SCORE_MIN <= score <= SCORE_MAX:
        raise ScoreOutOfRange(f"{where}: score {score} outside [{SCORE_MIN}, {SCORE_MAX}]")


def load_labels(path) -> list[LabelRecord]:
    """Parse a JSONL label file (keys exactly clean/degraded/speaker/segment_index/score)."""
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError as exc:
        raise NotFound(f"no such file: {path}") from exc
    out, seen = [], set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: {exc.msg}") from exc
        if not isinstance(obj, dict) or set(obj) != set(LABEL_KEYS):
            raise ParseError(f"{path}:{lineno}: expected keys {list(LABEL_KEYS)}")
        try:
            rec = LabelRecord(str(obj["clean"]), str(obj["degraded"]), str(obj["speaker"]),
                              int(obj["segment_index"]), float(obj["score"]))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if rec.segment_index < 0:
            raise ParseError(f"{path}:{lineno}: negative segment_index")
        _check_score(rec.score, f"{path}:{lineno}")
        if rec.key in seen:
            raise DuplicateKey(f"{path}:{lineno}: duplicate ({rec.clean}, {rec.segment_index})")
        seen.add(rec.key)
        out.append(rec)
    return out


def labels_jsonl(records) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=False) + "\n" for r in records)


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SegmentPair:
    clean: np.ndarray
    degraded: np.ndarray
    speaker: int
    score: float
    name: str = ""

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise ConfigInvalid("clean and degraded frames differ in length")
        _check_score(self.score, self.name or "segment")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigInvalid("val_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigInvalid("steps must be >= 0")

    @property
    def adam(self) -> ge.AdamHyper:
        return ge.AdamHyper(self.learning_rate, self.beta1, self.beta2, self.eps)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def split_indices(n: int, val_fraction: float, seed: int):
    """Seeded shuffle; validation takes the first ceil(n * val_fraction) entries."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.ceil(n * val_fraction)
    return order[n_val:], order[:n_val]


def assemble_dataset(pairs, labels, speaker_map: dict, seed: int, val_fraction: float = 0.1):
    """Attach scores to degraded pairs and split into ``(train, val)``.

    ``labels`` is a sequence of :class:`LabelRecord` matched on
    ``(basename(clean), segment_index)``, or the string ``"proxy"``.
    """
    pairs = list(pairs)
    table = None
    if not (isinstance(labels, str) and labels == "proxy"):
        table = {rec.key: rec for rec in labels}
    out = []
    for p in pairs:
        if p.speaker not in speaker_map:
            raise UnknownSpeaker(f"speaker {p.speaker!r} of {p.clean_name} not in speaker map")
        if table is None:
            score = proxy_score(p.clean, p.degraded)
        else:
            rec = table.get((p.clean_name, p.segment_index))
            if rec is None:
                raise MissingLabel(f"no label for ({p.clean_name}, {p.segment_index})")
            score = rec.score
        out.append(SegmentPair(np.asarray(p.clean), np.asarray(p.degraded), speaker_map[p.speaker],
                               float(score), p.clean_name))
    train_idx, val_idx = split_indices(len(out), val_fraction, seed)
    return [out[i] for i in train_idx], [out[i] for i in val_idx]


# --------------------------------------------------------------------------
# training


def predict(model: Model, pair: SegmentPair) -> float:
    return pesqnet.forward(model, pair.clean, pair.degraded, pair.speaker)


def _mse_on(model, data):
    if not data:
        return float("nan")
    return mean_squared_error([predict(model, p) for p in data], [p.score for p in data])


def sample_gradient(model: Model, pair: SegmentPair):
    """Squared-error loss and parameter gradients for one pair."""
    tape = ge.Tape()
    bound = pesqnet.bind(tape, model)
    score = pesqnet.forward_graph(tape, bound, model.config, pair.clean, pair.degraded, pair.speaker)
    target = tape.constant(np.asarray(pair.score))
    loss = ge.mse(score, target)
    return loss.item(), tape.backward(loss)


def batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    """Endless batches from successive seeded epoch permutations."""
    pending = []
    while True:
        while len(pending) < batch_size:
            pending.extend(rng.permutation(n).tolist())
        batch, pending = pending[:batch_size], pending[batch_size:]
        yield batch


@dataclass
class HistoryEntry:
    step: int
    train_loss: float
    val_loss: float


def monitor_losses(model: Model, train_set, val_set):
    """``(train_loss, val_loss)`` as recorded in the training history."""
    return _mse_on(model, train_set[:MONITOR_PAIRS]), _mse_on(model, val_set)


def train(model: Model, data, tc: TrainConfig, log=None):
    """Fit scores by batch-averaged squared error with Adam.

    Returns ``(trained_model, history)``. History holds an entry at step 0
    and every 50 steps; ``train_loss`` is the MSE over the first 256
    training pairs and ``val_loss`` the MSE over the whole validation set.
    """
    train_set, val_set = data
    if not train_set:
        raise EmptyDataset("training set is empty")
    model = model.copy()
    rng = np.random.default_rng([tc.seed, 0x7A1])
    state = ge.AdamState()
    hyper = tc.adam

    def record(step):
        entry = HistoryEntry(step, *monitor_losses(model, train_set, val_set))
        history.append(entry)
        if log is not None:
            log(entry)

    history: list[HistoryEntry] = []
    record(0)
    batches = batch_stream(len(train_set), tc.batch_size, rng)
    for step in range(1, tc.steps + 1):
        total = None
        for i in next(batches):
            _, grads = sample_gradient(model, train_set[i])
            if total is None:
                total = grads
            else:
                for name in total:
                    total[name] = total[name] + grads[name]
        mean = {name: g / tc.batch_size for name, g in total.items()}
        ge.adam_step(model.params, mean, state, hyper, step)
        if step % VAL_EVERY == 0:
            record(step)
    return model, history


def evaluate(model: Model, data):
    """``(mse, pearson_r)`` between predicted and labelled scores.

    A model whose predictions are constant over ``data`` gets ``r = nan``;
    its MSE is still reported.
    """
    data = list(data)
    if len(data) < 2:
        raise EmptyDataset("evaluation needs at least two pairs")
    labels = np.array([p.score for p in data])
    if np.all(labels == labels[0]):
        raise DegenerateLabels("labels have zero variance")
    preds = np.array([predict(model, p) for p in data])
    r = float("nan") if np.all(preds == preds[0]) else pearson(preds, labels)
    return mean_squared_error(preds, labels), r


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"DPQ1"
VERSION = 1


def checkpoint_bytes(model: Model) -> bytes:
    cfg = dict(model.config.to_dict())
    cfg["speaker_names"] = list(model.speaker_names)
    cfg_json = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg_json)), cfg_json, struct.pack("<I", len(model.params))]
    for name, value in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model: Model, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ParseError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> Model:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a checkpoint (bad magic bytes)")
    if len(data) < 16:
        raise ChecksumMismatch("checkpoint too short to hold a checksum")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("CRC32 does not match checkpoint contents")
    r = _Reader(body)
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version}, expected {VERSION}")
    try:
        cfg = json.loads(r.take(cfg_len).decode("utf-8"))
        names = cfg.pop("speaker_names")
        config = ModelConfig.from_dict(cfg)
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"bad config JSON: {exc}") from exc
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(body):
        raise ParseError("trailing bytes after parameters")
    model = Model(config, params, tuple(names))
    pesqnet.audit_shapes(model)
    return model


def load_checkpoint(path) -> Model:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise NotFound(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return parse_checkpoint(data)
