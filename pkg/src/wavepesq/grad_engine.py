"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs need gradients, in
creation order; :meth:`Tape.backward` replays the record in reverse. Only the
primitives the quality regressor and its losses use are provided.

    tape = Tape()
    w = tape.parameter("w", np.ones((1, 1, 2)))
    b = tape.parameter("b", np.zeros(1))
    x = tape.constant(np.arange(8.0).reshape(1, 8))
    loss = reduce("sum", conv1d_causal(x, w, b, dilation=2))
    grads = tape.backward(loss)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import NotScalar, NumericalFailure, RankMismatch, ShapeMismatch


class Tensor:
    __slots__ = ("value", "tape", "node", "requires_grad", "name")

    def __init__(self, value, tape, node, requires_grad, name=None):
        self.value = value
        self.tape = tape
        self.node = node
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a scalar")
        return float(self.value.reshape(()))

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(node={self.node}, shape={self.shape})"


@dataclass
class _Record:
    op: str
    inputs: tuple
    out: int
    backward: Callable


class Tape:
    """Ordered operation record plus a registry of named parameters.

    With ``record=False`` the tape only evaluates values; it is the cheap mode
    for inference and finite differences.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.records: list[_Record] = []
        self.params: dict[str, Tensor] = {}
        self._next = 0

    def _new(self, value, requires_grad, name=None) -> Tensor:
        t = Tensor(value, self, self._next, requires_grad and self.record, name)
        self._next += 1
        return t

    def parameter(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 3:
            raise RankMismatch(f"parameter {name!r} has rank {value.ndim} > 3")
        t = self._new(value, trainable, name)
        self.params[name] = t
        return t

    def constant(self, value) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 3:
            raise RankMismatch(f"constant has rank {value.ndim} > 3")
        return self._new(value, False)

    def emit(self, op: str, value, inputs, backward) -> Tensor:
        """Register an operation output; ``backward(g)`` returns one gradient per input."""
        if not np.all(np.isfinite(value)):
            raise NumericalFailure(f"{op} produced non-finite values")
        need = self.record and any(t.requires_grad for t in inputs)
        out = self._new(value, need)
        if need:
            self.records.append(_Record(op, tuple(inputs), out.node, backward))
        return out

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every registered parameter.

        Parameters that are frozen or unreachable get zero arrays.
        """
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.value)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out, None) if rec.out != loss.node else grads.get(rec.out)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.node)
                grads[inp.node] = gi if prev is None else prev + gi
        self.grads = grads
        return {
            name: grads.get(t.node, np.zeros_like(t.value)) if t.requires_grad else np.zeros_like(t.value)
            for name, t in self.params.items()
        }


def _tape_of(*tensors) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("tensors belong to different tapes")
    return tape


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# primitives


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    """Dilated causal convolution, ``[C_in, T] -> [C_out, T]``.

    ``y[o, t] = b[o] + sum_c sum_k w[o, c, k] * x[c, t - dilation*(K-1-k)]``
    with zero left padding, so kernel index ``K-1`` is the current sample.
    """
    if x.value.ndim != 2 or w.value.ndim != 3 or b.value.ndim != 1:
        raise ShapeMismatch(f"conv1d_causal: bad ranks x{x.shape} w{w.shape} b{b.shape}")
    c_out, c_in, k_size = w.shape
    if x.shape[0] != c_in or b.shape[0] != c_out or k_size < 1:
        raise ShapeMismatch(f"conv1d_causal: x{x.shape} w{w.shape} b{b.shape}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    tape = _tape_of(x, w, b)
    xv, wv = x.value, w.value
    y = kernels.conv_forward(xv, wv, b.value, int(dilation))

    def backward(g):
        gx, gw = kernels.conv_backward(xv, wv, g, int(dilation))
        return gx, gw, g.sum(axis=1)

    return tape.emit("conv1d_causal", y, (x, w, b), backward)


def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    av = a.value
    if kind in ("add", "mul"):
        if b is None:
            raise ShapeMismatch(f"{kind} needs two operands")
        _same_shape(kind, a, b)
        tape = _tape_of(a, b)
        bv = b.value
        if kind == "add":
            return tape.emit("add", av + bv, (a, b), lambda g: (g, g))
        return tape.emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))
    if b is not None:
        raise ShapeMismatch(f"{kind} is unary")
    tape = a.tape
    if kind == "tanh":
        y = np.tanh(av)
        return tape.emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = _sigmoid(av)
        return tape.emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))
    if kind == "relu":
        mask = av > 0.0
        return tape.emit("relu", np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a, b):
    return elementwise("add", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def tanh(a):
    return elementwise("tanh", a)


def sigmoid(a):
    return elementwise("sigmoid", a)


def relu(a):
    return elementwise("relu", a)


def scale_shift(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * a + shift`` for Python-float constants."""
    scale = float(scale)
    return a.tape.emit("scale_shift", a.value * scale + float(shift), (a,), lambda g: (g * scale,))


def reduce(kind: str, a: Tensor) -> Tensor:
    av = a.value
    shape = av.shape
    if kind == "sum":
        return a.tape.emit("sum", np.asarray(av.sum()), (a,), lambda g: (np.full(shape, float(g)),))
    if kind == "mean":
        n = av.size
        return a.tape.emit("mean", np.asarray(av.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))
    if kind == "global_avg_over_time":
        if av.ndim != 2:
            raise RankMismatch(f"global_avg_over_time needs [C, T], got shape {shape}")
        t_len = shape[1]
        return a.tape.emit(
            "global_avg_over_time",
            av.mean(axis=1),
            (a,),
            lambda g: (np.repeat(g[:, None] / t_len, t_len, axis=1),),
        )
    raise ValueError(f"unknown reduce kind {kind!r}")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``W @ x + b`` for ``x`` of shape ``[D_in]``."""
    if x.value.ndim != 1 or w.value.ndim != 2 or b.value.ndim != 1:
        raise ShapeMismatch(f"affine: bad ranks x{x.shape} W{w.shape} b{b.shape}")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"affine: x{x.shape} W{w.shape} b{b.shape}")
    tape = _tape_of(x, w, b)
    xv, wv = x.value, w.value
    return tape.emit("affine", wv @ xv + b.value, (x, w, b), lambda g: (wv.T @ g, np.outer(g, xv), g))


def mse(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mse", a, b)
    tape = _tape_of(a, b)
    diff = a.value - b.value
    n = diff.size

    def backward(g):
        ga = (2.0 * float(g) / n) * diff
        return ga, -ga

    return tape.emit("mse", np.asarray(np.mean(diff * diff)), (a, b), backward)


# structural helpers


def stack(rows) -> Tensor:
    """Stack rank-1 ``[T]`` tensors into ``[n, T]``."""
    rows = list(rows)
    t_len = rows[0].shape
    for r in rows:
        if r.value.ndim != 1 or r.shape != t_len:
            raise ShapeMismatch("stack needs equal-length rank-1 tensors")
    tape = _tape_of(*rows)
    return tape.emit("stack", np.stack([r.value for r in rows]), rows, lambda g: tuple(g[i] for i in range(len(rows))))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return a.tape.emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take_row(table: Tensor, index: int) -> Tensor:
    """Row ``index`` of a ``[N, D]`` table (embedding lookup)."""
    if table.value.ndim != 2:
        raise RankMismatch("take_row needs a rank-2 table")
    index = int(index)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return table.tape.emit("take_row", table.value[index].copy(), (table,), backward)


# --------------------------------------------------------------------------
# optimisation and gradient checking


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper, step: int):
    """One bias-corrected Adam update, applied in sorted parameter-name order.

    ``params`` arrays are updated in place; returns ``(params, state)``.
    """
    if step < 1:
        raise ValueError("step index starts at 1")
    c1 = 1.0 - hyper.beta1**step
    c2 = 1.0 - hyper.beta2**step
    for name in sorted(grads):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: parameter {p.shape} vs gradient {g.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeMismatch(f"{name}: optimizer state shape mismatch")
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
        p -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        state.m[name] = m
        state.v[name] = v
    return params, state


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    worst: str

    def __str__(self):
        return f"max_rel_err={self.max_rel_err:.3e} checked={self.checked} worst={self.worst} pass={self.passed}"


def relative_error(analytic, numeric, floor: float = 1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    loss_fn: Callable[[Tape, dict], Tensor],
    params: dict,
    epsilon: float = 1e-5,
    tolerance: float = 1e-6,
    max_entries: int = 10_000,
    seed: int = 0,
    reference: Optional[Callable[[dict], float]] = None,
    reference_dtype=np.longdouble,
) -> GradCheckReport:
    """Compare backward against central finite differences.

    ``loss_fn(tape, values)`` must register every entry of ``values`` with
    ``tape.parameter`` and return a scalar loss. Above ``max_entries``
    total entries a seeded random subsample is checked.

    By default the differences re-evaluate ``loss_fn`` in float64. Passing
    ``reference(values)`` (an independent evaluation of the same loss)
    evaluates the differences on ``reference_dtype`` copies instead; at
    ``epsilon=1e-5`` float64 rounding of an O(1) loss alone contributes
    ~1e-11 absolute error, which swamps small gradient entries.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    values = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    analytic = tape.backward(loss_fn(tape, values))

    if reference is None:
        probe_values = values
        eps = epsilon

        def evaluate():
            return loss_fn(Tape(record=False), probe_values).item()
    else:
        probe_values = {k: v.astype(reference_dtype) for k, v in values.items()}
        eps = reference_dtype(epsilon)

        def evaluate():
            return reference(probe_values)

    entries = [(name, idx) for name in sorted(values) for idx in np.ndindex(values[name].shape)]
    if len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(entries), size=max_entries, replace=False))
        entries = [entries[i] for i in pick]

    worst, worst_at = 0.0, ""
    for name, idx in entries:
        arr = probe_values[name]
        orig = arr[idx]
        arr[idx] = orig + eps
        up = evaluate()
        arr[idx] = orig - eps
        down = evaluate()
        arr[idx] = orig
        numeric = float((up - down) / (2 * eps))
        err = float(relative_error(analytic[name][idx], numeric))
        if err > worst or not worst_at:
            worst, worst_at = err, f"{name}{list(idx)}"
    return GradCheckReport(worst, worst < tolerance, len(entries), worst_at)
