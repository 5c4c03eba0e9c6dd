"""Dilated causal convolution regressor for full-reference quality scores.

The network sees the clean and degraded frames as two input channels and
maps them, with a global speaker embedding, to a score in (-0.5, 4.5).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import grad_engine as ge
from .errors import ConfigInvalid, FrameTooShort, ShapeMismatch, SpeakerOutOfRange

SCORE_MIN = -0.5
SCORE_MAX = 4.5


@dataclass(frozen=True)
class ModelConfig:
    kernel_size: int = 2
    dilation_cycles: int = 2
    max_dilation_log2: int = 11
    residual_channels: int = 32
    skip_channels: int = 64
    speaker_count: int = 1
    speaker_embed_dim: int = 16
    frame_len: int = 4095

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown config fields: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


def dilations(config: ModelConfig) -> list[int]:
    per_cycle = [2**i for i in range(config.max_dilation_log2 + 1)]
    return per_cycle * config.dilation_cycles


def receptive_field(config: ModelConfig) -> int:
    """``1 + (K - 1) * sum(dilations)`` over every layer."""
    return 1 + (config.kernel_size - 1) * sum(dilations(config))


def validate(config: ModelConfig) -> None:
    for name in ("kernel_size", "dilation_cycles", "residual_channels", "skip_channels",
                 "speaker_count", "speaker_embed_dim", "frame_len"):
        if getattr(config, name) < 1:
            raise ConfigInvalid(f"{name} must be >= 1, got {getattr(config, name)}")
    if config.max_dilation_log2 < 0:
        raise ConfigInvalid("max_dilation_log2 must be >= 0")
    rf = receptive_field(config)
    if rf < 2 * config.frame_len:
        raise ConfigInvalid(
            f"receptive field {rf} is shorter than twice the frame length ({2 * config.frame_len})"
        )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Closed-form parameter shapes, in initialisation order."""
    r, s, e, k = config.residual_channels, config.skip_channels, config.speaker_embed_dim, config.kernel_size
    shapes = {"input.weight": (r, 2, 1), "input.bias": (r,)}
    n_layers = len(dilations(config))
    for i in range(n_layers):
        p = f"layers.{i}."
        shapes[p + "filter.weight"] = (r, r, k)
        shapes[p + "filter.bias"] = (r,)
        shapes[p + "gate.weight"] = (r, r, k)
        shapes[p + "gate.bias"] = (r,)
        shapes[p + "cond_filter.weight"] = (r, e)
        shapes[p + "cond_gate.weight"] = (r, e)
        if i < n_layers - 1:
            shapes[p + "residual.weight"] = (r, r, 1)
            shapes[p + "residual.bias"] = (r,)
        shapes[p + "skip.weight"] = (s, r, 1)
        shapes[p + "skip.bias"] = (s,)
    shapes["head.conv.weight"] = (s, s, 1)
    shapes["head.conv.bias"] = (s,)
    shapes["head.out.weight"] = (1, s)
    shapes["head.out.bias"] = (1,)
    shapes["speaker_embedding"] = (config.speaker_count, e)
    return shapes


def _fan_in(name: str, shapes: dict) -> int:
    if name.endswith(".bias"):
        name = name[: -len("bias")] + "weight"
    shape = shapes[name]
    return int(np.prod(shape[1:]))


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    speaker_names: tuple = field(default=())

    def __post_init__(self):
        if not self.speaker_names:
            self.speaker_names = tuple(f"spk{i}" for i in range(self.config.speaker_count))
        self.speaker_names = tuple(self.speaker_names)
        if len(self.speaker_names) != self.config.speaker_count:
            raise ConfigInvalid("speaker name table does not match speaker_count")

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, self.speaker_names)

    def speaker_index(self, name: str) -> int:
        try:
            return self.speaker_names.index(name)
        except ValueError:
            raise SpeakerOutOfRange(f"unknown speaker {name!r}") from None


def audit_shapes(model: Model) -> None:
    expected = parameter_shapes(model.config)
    if list(expected) != list(model.params):
        missing = sorted(set(expected) - set(model.params))
        extra = sorted(set(model.params) - set(expected))
        raise ShapeMismatch(f"parameter names differ: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if model.params[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {model.params[name].shape}")


def build(config: ModelConfig, seed: int = 0, speaker_names=()) -> Model:
    """Initialise a model: uniform in [-a, a] with a = sqrt(1/fan_in); embeddings in [-0.1, 0.1]."""
    validate(config)
    rng = np.random.Generator(np.random.PCG64(seed))
    shapes = parameter_shapes(config)
    params = {}
    for name, shape in shapes.items():
        bound = 0.1 if name == "speaker_embedding" else math.sqrt(1.0 / _fan_in(name, shapes))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(config, params, tuple(speaker_names))


def bind(tape: ge.Tape, model: Model, trainable: bool = True, prefix: str = "") -> dict[str, ge.Tensor]:
    return {name: tape.parameter(prefix + name, value, trainable) for name, value in model.params.items()}


def _as_row(tape, x, t_len):
    if isinstance(x, ge.Tensor):
        if x.value.ndim == 2 and x.shape[0] == 1:
            x = ge.reshape(x, (x.shape[1],))
        if x.value.ndim != 1 or x.shape[0] != t_len:
            raise ShapeMismatch(f"frame tensor has shape {x.shape}, expected ({t_len},)")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (t_len,):
        raise ShapeMismatch(f"frame has shape {arr.shape}, expected ({t_len},)")
    return tape.constant(arr)


def _network(tape, bound, config, clean, degraded, speaker, t_len=None):
    """Return ``(skip_sum, score)`` tensors; ``skip_sum`` is the pre-ReLU skip total."""
    t_len = config.frame_len if t_len is None else t_len
    if not 0 <= int(speaker) < config.speaker_count:
        raise SpeakerOutOfRange(f"speaker {speaker} not in [0, {config.speaker_count})")
    x = ge.stack([_as_row(tape, clean, t_len), _as_row(tape, degraded, t_len)])
    h = ge.conv1d_causal(x, bound["input.weight"], bound["input.bias"], 1)
    emb = ge.take_row(bound["speaker_embedding"], speaker)

    skip_sum = None
    dil = dilations(config)
    for i, d in enumerate(dil):
        p = f"layers.{i}."
        f_bias = ge.affine(emb, bound[p + "cond_filter.weight"], bound[p + "filter.bias"])
        g_bias = ge.affine(emb, bound[p + "cond_gate.weight"], bound[p + "gate.bias"])
        f = ge.conv1d_causal(h, bound[p + "filter.weight"], f_bias, d)
        g = ge.conv1d_causal(h, bound[p + "gate.weight"], g_bias, d)
        z = ge.mul(ge.tanh(f), ge.sigmoid(g))
        s = ge.conv1d_causal(z, bound[p + "skip.weight"], bound[p + "skip.bias"], 1)
        skip_sum = s if skip_sum is None else ge.add(skip_sum, s)
        if i < len(dil) - 1:
            h = ge.add(h, ge.conv1d_causal(z, bound[p + "residual.weight"], bound[p + "residual.bias"], 1))

    a = ge.relu(ge.conv1d_causal(ge.relu(skip_sum), bound["head.conv.weight"], bound["head.conv.bias"], 1))
    pooled = ge.reduce("global_avg_over_time", a)
    logit = ge.reshape(ge.affine(pooled, bound["head.out.weight"], bound["head.out.bias"]), ())
    score = ge.scale_shift(ge.sigmoid(logit), SCORE_MAX - SCORE_MIN, SCORE_MIN)
    return skip_sum, score


def forward_graph(tape: ge.Tape, bound: dict, config: ModelConfig, clean, degraded, speaker: int) -> ge.Tensor:
    """Record the scoring graph on ``tape`` and return the scalar score tensor.

    ``degraded`` may be an upstream tensor (e.g. an enhancer output) so the
    score can be differentiated with respect to it.
    """
    return _network(tape, bound, config, clean, degraded, speaker)[1]


def forward(model: Model, clean, degraded, speaker: int) -> float:
    """Predicted quality score in (-0.5, 4.5)."""
    tape = ge.Tape(record=False)
    return forward_graph(tape, bind(tape, model, trainable=False), model.config, clean, degraded, speaker).item()


class ReceptiveFieldProbe(NamedTuple):
    samples: int
    truncated: bool


def empirical_receptive_field(model: Model, length: int | None = None, strict: bool = False,
                              delta: float = 1e-3) -> ReceptiveFieldProbe:
    """Measure how far back the last output step can see, by perturbation.

    Bisects over the position of a ``delta`` bump in the degraded channel,
    watching the pre-ReLU skip total at time ``length - 1``. When even
    index 0 influences the probe, the result is ``length`` with
    ``truncated=True`` (``strict`` turns that into :class:`FrameTooShort`).
    """
    t_len = model.config.frame_len if length is None else int(length)
    rng = np.random.default_rng(12345)
    clean = rng.uniform(-0.5, 0.5, t_len)
    base_deg = rng.uniform(-0.5, 0.5, t_len)

    def probe(deg):
        tape = ge.Tape(record=False)
        bound = bind(tape, model, trainable=False)
        skip_sum, _ = _network(tape, bound, model.config, clean, deg, 0, t_len)
        return skip_sum.value[:, -1].copy()

    reference = probe(base_deg)

    def influences(i):
        deg = base_deg.copy()
        deg[i] += delta
        return not np.array_equal(probe(deg), reference)

    if influences(0):
        if strict:
            raise FrameTooShort(f"probe length {t_len} does not exceed the receptive field")
        return ReceptiveFieldProbe(t_len, True)
    lo, hi = 0, t_len - 1  # influences(lo) is False, influences(hi) is True
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if influences(mid):
            hi = mid
        else:
            lo = mid
    return ReceptiveFieldProbe(t_len - 1 - hi + 1, False)


def grad_check_config(layers: int, frame: int, seed: int, channels: tuple[int, int, int] | None = None) -> ModelConfig:
    """A small config with ``layers`` dilated layers valid for ``frame``-sample inputs.

    Dilations double per layer; the kernel is the smallest one whose
    receptive field covers twice the frame.
    """
    if layers < 1 or frame < 1:
        raise ConfigInvalid("layers and frame must be >= 1")
    rng = np.random.default_rng(seed)
    if channels is None:
        channels = (int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4)))
    dsum = 2**layers - 1
    kernel = max(2, 1 + math.ceil((2 * frame - 1) / dsum))
    return ModelConfig(
        kernel_size=kernel,
        dilation_cycles=1,
        max_dilation_log2=layers - 1,
        residual_channels=channels[0],
        skip_channels=channels[1],
        speaker_count=2,
        speaker_embed_dim=channels[2],
        frame_len=frame,
    )


def gradient_check(config: ModelConfig, seed: int, epsilon: float = 1e-5, tolerance: float = 1e-6,
                   max_entries: int = 10_000, extended: bool = True) -> ge.GradCheckReport:
    """Finite-difference check of the full scoring graph for a seeded model and input.

    With ``extended`` the differences come from :func:`reference_score` in
    long double; otherwise from the float64 engine itself.
    """
    model = build(config, seed)
    rng = np.random.default_rng([seed, 1])
    clean = rng.uniform(-0.8, 0.8, config.frame_len)
    degraded = clean + rng.normal(0.0, 0.2, config.frame_len)
    degraded = np.clip(degraded, -1.0, 1.0)
    speaker = int(rng.integers(config.speaker_count))

    def loss_fn(tape, values):
        bound = {name: tape.parameter(name, values[name]) for name in model.params}
        return forward_graph(tape, bound, config, clean, degraded, speaker)

    def reference(values):
        return reference_score(values, config, clean, degraded, speaker)

    return ge.check_gradients(loss_fn, model.params, epsilon, tolerance, max_entries, seed,
                              reference=reference if extended else None)


def reduced_config(frame_len: int = 512, speaker_count: int = 1, **overrides) -> ModelConfig:
    """Desk-scale config: one cycle of dilations 1..256 with a 4-tap kernel."""
    cfg = ModelConfig(
        kernel_size=4,
        dilation_cycles=1,
        max_dilation_log2=8,
        residual_channels=8,
        skip_channels=16,
        speaker_count=speaker_count,
        speaker_embed_dim=4,
        frame_len=frame_len,
    )
    return replace(cfg, **overrides)


def reference_score(params: dict, config: ModelConfig, clean, degraded, speaker: int, dtype=np.longdouble):
    """Score computed with plain array code in ``dtype``, bypassing the tape and kernels.

    Serves as the independent forward for finite differences; extended
    precision keeps its rounding far below the perturbation signal.
    """
    p = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    one = dtype(1)

    def conv(x, w, b, d):
        t_len = x.shape[1]
        k_size = w.shape[2]
        y = np.repeat(b[:, None], t_len, axis=1)
        for k in range(k_size):
            shift = d * (k_size - 1 - k)
            if shift < t_len:
                y[:, shift:] = y[:, shift:] + w[:, :, k] @ x[:, : t_len - shift]
        return y

    def sig(z):
        return one / (one + np.exp(-z))

    x = np.stack([np.asarray(clean, dtype=dtype), np.asarray(degraded, dtype=dtype)])
    h = conv(x, p["input.weight"], p["input.bias"], 1)
    emb = p["speaker_embedding"][speaker]
    skip_sum = None
    dil = dilations(config)
    for i, d in enumerate(dil):
        q = f"layers.{i}."
        f = conv(h, p[q + "filter.weight"], p[q + "cond_filter.weight"] @ emb + p[q + "filter.bias"], d)
        g = conv(h, p[q + "gate.weight"], p[q + "cond_gate.weight"] @ emb + p[q + "gate.bias"], d)
        z = np.tanh(f) * sig(g)
        s = conv(z, p[q + "skip.weight"], p[q + "skip.bias"], 1)
        skip_sum = s if skip_sum is None else skip_sum + s
        if i < len(dil) - 1:
            h = h + conv(z, p[q + "residual.weight"], p[q + "residual.bias"], 1)
    a = np.maximum(conv(np.maximum(skip_sum, 0), p["head.conv.weight"], p["head.conv.bias"], 1), 0)
    logit = (p["head.out.weight"] @ a.mean(axis=1) + p["head.out.bias"])[0]
    return dtype(SCORE_MIN) + dtype(SCORE_MAX - SCORE_MIN) * sig(logit)
