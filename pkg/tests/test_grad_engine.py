import numpy as np
import pytest
from hypothesis import given, strategies as st

from wavepesq import grad_engine as ge
from wavepesq.errors import NotScalar, NumericalFailure, RankMismatch, ShapeMismatch

from test_kernels import conv_loop


def _fd(fn, x, eps=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = fn(x)
        x[idx] = old - eps
        down = fn(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def _rel(a, b):
    return float(np.max(ge.relative_error(a, b)))


# ---------------------------------------------------------------- conv


def test_conv_identity_tap(rng):
    tape = ge.Tape()
    x = tape.constant(rng.standard_normal((1, 10)))
    for d in (1, 3, 7):
        y = ge.conv1d_causal(x, tape.constant([[[0.0, 1.0]]]), tape.constant([0.0]), d)
        assert np.array_equal(y.value, x.value)


def test_conv_pure_delay():
    tape = ge.Tape()
    x = tape.constant(np.arange(1.0, 9.0).reshape(1, 8))
    y = ge.conv1d_causal(x, tape.constant([[[1.0, 0.0]]]), tape.constant([0.0]), 3)
    assert y.value.tolist() == [[0, 0, 0, 1, 2, 3, 4, 5]]


def test_conv_matches_loop(rng):
    tape = ge.Tape()
    x, w, b = rng.standard_normal((2, 16)), rng.standard_normal((3, 2, 2)), rng.standard_normal(3)
    y = ge.conv1d_causal(tape.constant(x), tape.constant(w), tape.constant(b), 4)
    assert np.max(np.abs(y.value - conv_loop(x, w, b, 4))) <= 1e-12


def test_conv_causality(rng):
    x = rng.standard_normal((2, 30))
    w, b = rng.standard_normal((3, 2, 3)), rng.standard_normal(3)
    def run(xv):
        tape = ge.Tape()
        return ge.conv1d_causal(tape.constant(xv), tape.constant(w), tape.constant(b), 2).value

    base = run(x)
    for t in (5, 17, 29):
        x2 = x.copy()
        x2[:, t] += 1.0
        y = run(x2)
        assert np.array_equal(y[:, :t], base[:, :t])
        assert not np.array_equal(y[:, t], base[:, t])


def test_conv_shape_errors():
    tape = ge.Tape()
    with pytest.raises(ShapeMismatch):
        ge.conv1d_causal(tape.constant(np.zeros((2, 5))), tape.constant(np.zeros((1, 3, 2))), tape.constant([0.0]))
    with pytest.raises(ShapeMismatch):
        ge.conv1d_causal(tape.constant(np.zeros(5)), tape.constant(np.zeros((1, 1, 2))), tape.constant([0.0]))


# ---------------------------------------------------------------- elementwise, reduce, affine, mse


def test_elementwise_examples(rng):
    tape = ge.Tape()
    x = tape.constant(rng.standard_normal((3, 4)))
    assert np.array_equal(ge.add(x, tape.constant(np.zeros((3, 4)))).value, x.value)
    z = tape.constant(np.zeros(3))
    assert ge.sigmoid(z).value.tolist() == [0.5] * 3
    assert ge.tanh(z).value.tolist() == [0.0] * 3


def test_elementwise_vs_scalar_loops(rng):
    import math

    a, b = rng.standard_normal(50) * 3, rng.standard_normal(50) * 3
    tape = ge.Tape()
    ta, tb = tape.constant(a), tape.constant(b)
    cases = {
        "add": (ge.add(ta, tb).value, [p + q for p, q in zip(a, b)]),
        "mul": (ge.mul(ta, tb).value, [p * q for p, q in zip(a, b)]),
        "tanh": (ge.tanh(ta).value, [math.tanh(p) for p in a]),
        "sigmoid": (ge.sigmoid(ta).value, [1 / (1 + math.exp(-p)) for p in a]),
        "relu": (ge.relu(ta).value, [max(p, 0.0) for p in a]),
    }
    for kind, (got, ref) in cases.items():
        assert np.max(np.abs(got - np.array(ref))) <= 1e-15, kind


def test_sigmoid_saturates_without_overflow():
    tape = ge.Tape()
    y = ge.sigmoid(tape.constant([-800.0, 800.0]))
    assert y.value.tolist() == [0.0, 1.0]


def test_reduce_examples(rng):
    tape = ge.Tape()
    assert ge.reduce("sum", tape.constant([1.0, 2.0, 3.0])).item() == 6.0
    assert ge.reduce("mean", tape.constant(np.full((3, 5), 2.5))).item() == 2.5
    a = rng.standard_normal((4, 7))
    got = ge.reduce("global_avg_over_time", tape.constant(a)).value
    ref = [sum(row) / 7 for row in a.tolist()]
    assert np.max(np.abs(got - ref)) <= 1e-14
    with pytest.raises(RankMismatch):
        ge.reduce("global_avg_over_time", tape.constant(np.zeros(3)))


def test_affine_examples(rng):
    tape = ge.Tape()
    x = rng.standard_normal(4)
    assert np.array_equal(ge.affine(tape.constant(x), tape.constant(np.eye(4)), tape.constant(np.zeros(4))).value, x)
    c = rng.standard_normal(3)
    assert np.array_equal(ge.affine(tape.constant(x), tape.constant(np.zeros((3, 4))), tape.constant(c)).value, c)
    w, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
    got = ge.affine(tape.constant(x), tape.constant(w), tape.constant(b)).value
    ref = [b[i] + sum(w[i, j] * x[j] for j in range(4)) for i in range(3)]
    assert np.max(np.abs(got - ref)) <= 1e-13


def test_mse_examples(rng):
    tape = ge.Tape()
    x = tape.constant(rng.standard_normal(9))
    assert ge.mse(x, x).item() == 0.0
    assert ge.mse(tape.constant([0.0]), tape.constant([2.0])).item() == 4.0
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    ref = sum((p - q) ** 2 for p, q in zip(a, b)) / 20
    assert abs(ge.mse(tape.constant(a), tape.constant(b)).item() - ref) <= 1e-13
    with pytest.raises(ShapeMismatch):
        ge.mse(tape.constant([1.0]), tape.constant([1.0, 2.0]))


def test_rank_limit():
    with pytest.raises(RankMismatch):
        ge.Tape().constant(np.zeros((1, 1, 1, 1)))


def test_non_finite_is_numerical_failure():
    tape = ge.Tape()
    a = tape.parameter("a", [1e308])
    with np.errstate(over="ignore"), pytest.raises(NumericalFailure):
        ge.mul(a, tape.constant([10.0]))


# ---------------------------------------------------------------- backward


def test_sum_gradient_is_ones(rng):
    tape = ge.Tape()
    x = tape.parameter("x", rng.standard_normal((3, 4)))
    g = tape.backward(ge.reduce("sum", x))
    assert np.array_equal(g["x"], np.ones((3, 4)))


def test_detached_parameter_has_zero_gradient(rng):
    tape = ge.Tape()
    x = tape.parameter("x", rng.standard_normal(5))
    p = tape.parameter("p", rng.standard_normal(5))
    frozen = tape.parameter("f", rng.standard_normal(5), trainable=False)
    loss = ge.reduce("sum", ge.mul(ge.tanh(x), frozen))
    g = tape.backward(loss)
    assert np.array_equal(g["p"], np.zeros(5))
    assert np.array_equal(g["f"], np.zeros(5))
    assert np.any(g["x"] != 0)


def test_backward_needs_scalar():
    tape = ge.Tape()
    x = tape.parameter("x", np.ones(3))
    with pytest.raises(NotScalar):
        tape.backward(ge.tanh(x))
    with pytest.raises(NotScalar):
        ge.tanh(x).item()


def test_fan_out_accumulates():
    tape = ge.Tape()
    x = tape.parameter("x", [3.0])
    loss = ge.reduce("sum", ge.add(ge.mul(x, x), x))
    assert tape.backward(loss)["x"].tolist() == [7.0]


def _primitive_losses(rng):
    r = rng.standard_normal
    return {
        "tanh": ({"a": r(6)}, lambda t, v: ge.reduce("sum", ge.mul(ge.tanh(v["a"]), t.constant(np.arange(6.0))))),
        "sigmoid": ({"a": r(6)}, lambda t, v: ge.reduce("sum", ge.mul(ge.sigmoid(v["a"]), t.constant(np.arange(6.0))))),
        "relu": ({"a": r(6) + np.sign(r(6))}, lambda t, v: ge.reduce("sum", ge.mul(ge.relu(v["a"]), v["a"]))),
        "mul": ({"a": r(5), "b": r(5)}, lambda t, v: ge.reduce("sum", ge.mul(v["a"], v["b"]))),
        "mean": ({"a": r((3, 4))}, lambda t, v: ge.reduce("mean", ge.mul(v["a"], v["a"]))),
        "gap": ({"a": r((3, 4))}, lambda t, v: ge.reduce("sum", ge.tanh(ge.reduce("global_avg_over_time", v["a"])))),
        "affine": ({"x": r(4), "w": r((3, 4)), "b": r(3)},
                   lambda t, v: ge.reduce("sum", ge.tanh(ge.affine(v["x"], v["w"], v["b"])))),
        "mse": ({"a": r(7), "b": r(7)}, lambda t, v: ge.mse(v["a"], v["b"])),
        "scale_shift": ({"a": r(4)}, lambda t, v: ge.reduce("sum", ge.tanh(ge.scale_shift(v["a"], -1.5, 0.3)))),
        "take_row": ({"e": r((3, 4))}, lambda t, v: ge.reduce("sum", ge.tanh(ge.take_row(v["e"], 1)))),
        "stack": ({"a": r(4), "b": r(4)}, lambda t, v: ge.reduce("sum", ge.tanh(ge.stack([v["a"], v["b"]])))),
        "conv": ({"x": r((2, 12)), "w": r((3, 2, 3)), "b": r(3)},
                 lambda t, v: ge.reduce("sum", ge.tanh(ge.conv1d_causal(v["x"], v["w"], v["b"], 2)))),
    }


@pytest.mark.parametrize("name", list(_primitive_losses(np.random.default_rng(0))))
def test_primitive_gradients_match_fd(name):
    params, fn = _primitive_losses(np.random.default_rng(7))[name]

    def loss_fn(tape, values):
        return fn(tape, {k: tape.parameter(k, v) for k, v in values.items()})

    report = ge.check_gradients(loss_fn, params, epsilon=1e-5, tolerance=1e-6)
    assert report.passed, report


def _three_layer_conv(seed):
    r = np.random.default_rng(seed)
    params = {}
    c = 3
    for i in range(3):
        params[f"w{i}"] = r.standard_normal((c, 2 if i == 0 else c, 2)) * 0.5
        params[f"b{i}"] = r.standard_normal(c) * 0.1
    x = r.standard_normal((2, 32))

    def loss_fn(tape, values):
        h = tape.constant(x)
        for i, d in enumerate((1, 2, 4)):
            h = ge.tanh(ge.conv1d_causal(h, tape.parameter(f"w{i}", values[f"w{i}"]),
                                         tape.parameter(f"b{i}", values[f"b{i}"]), d))
        return ge.reduce("mean", h)

    return loss_fn, params


def test_three_layer_conv_graph_fd():
    loss_fn, params = _three_layer_conv(3)
    report = ge.check_gradients(loss_fn, params, epsilon=1e-5, tolerance=1e-6)
    assert report.passed, report
    assert report.checked == sum(v.size for v in params.values())


def test_replay_is_bit_identical():
    loss_fn, params = _three_layer_conv(4)
    t1, t2 = ge.Tape(), ge.Tape()
    l1, l2 = loss_fn(t1, params), loss_fn(t2, params)
    assert l1.item() == l2.item()
    g1, g2 = t1.backward(l1), t2.backward(l2)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_check_gradients_zero_tolerance_fails():
    loss_fn, params = _three_layer_conv(5)
    report = ge.check_gradients(loss_fn, params, tolerance=0.0)
    assert not report.passed
    assert report.max_rel_err > 0
    assert "max_rel_err" in str(report)


def test_check_gradients_subsample_is_seeded():
    loss_fn, params = _three_layer_conv(6)
    a = ge.check_gradients(loss_fn, params, max_entries=10, seed=3)
    b = ge.check_gradients(loss_fn, params, max_entries=10, seed=3)
    assert a == b
    assert a.checked == 10


def test_relative_error_floor():
    assert ge.relative_error(0.0, 1e-10) == pytest.approx(1e-2)
    assert ge.relative_error(2.0, 1.0) == pytest.approx(0.5)


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient():
    p = {"a": np.array([1.0, -2.0])}
    st_ = ge.AdamState(m={"a": np.array([0.5, 0.5])}, v={"a": np.array([1.0, 1.0])})
    hyper = ge.AdamHyper(lr=0.1)
    before = p["a"].copy()
    ge.adam_step(p, {"a": np.zeros(2)}, st_, hyper, 1)
    # moments decay; the parameter moves only through the surviving first moment
    assert np.allclose(st_.m["a"], 0.45)
    assert np.allclose(st_.v["a"], 0.999)
    fresh = {"a": before.copy()}
    ge.adam_step(fresh, {"a": np.zeros(2)}, ge.AdamState(), hyper, 1)
    assert np.array_equal(fresh["a"], before)


@given(st.lists(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=10),
       st.floats(1e-5, 1e-1))
def test_adam_first_step_is_signed_lr(grads, lr):
    g = np.array(grads)
    p = {"a": np.zeros_like(g)}
    ge.adam_step(p, {"a": g}, ge.AdamState(), ge.AdamHyper(lr=lr), 1)
    assert np.all(np.abs(p["a"]) <= lr)
    assert np.allclose(p["a"], -lr * np.sign(g), rtol=1e-4)


def test_adam_matches_reference_sequence(rng):
    hyper = ge.AdamHyper(lr=0.01, beta1=0.8, beta2=0.99, eps=1e-6)
    p = {"a": rng.standard_normal(3)}
    ref = p["a"].copy()
    m = np.zeros(3)
    v = np.zeros(3)
    state = ge.AdamState()
    for step in range(1, 6):
        g = rng.standard_normal(3)
        ge.adam_step(p, {"a": g}, state, hyper, step)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        ref = ref - 0.01 * (m / (1 - 0.8**step)) / (np.sqrt(v / (1 - 0.99**step)) + 1e-6)
    assert np.allclose(p["a"], ref, rtol=0, atol=1e-15)


def test_adam_deterministic_and_shape_checked(rng):
    g = {"b": rng.standard_normal(4), "a": rng.standard_normal((2, 2))}
    runs = []
    for _ in range(2):
        p = {"a": np.ones((2, 2)), "b": np.zeros(4)}
        s = ge.AdamState()
        for step in range(1, 4):
            ge.adam_step(p, g, s, ge.AdamHyper(), step)
        runs.append(p)
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in g)
    with pytest.raises(ShapeMismatch):
        ge.adam_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, ge.AdamState(), ge.AdamHyper(), 1)
