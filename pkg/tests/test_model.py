import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperlearn.autodiff import Tape
from hyperlearn.gradcheck import check_tape_function, suite_gate
from hyperlearn.model import (InnerParams, NumericError, OptimizerState, forward,
                              gated_forward, hd_update, inner_step, loss, loss_and_grad,
                              predict)


def _params(seed=0, sizes=(6, 8, 4, 3)):
    return InnerParams.init(list(sizes), seed)


def _forward(params, X):
    t = Tape()
    logits, h = forward(t, params.to_tape(t), t.leaf(X))
    return logits.values, h.values


def test_layout():
    p = InnerParams.init([784, 64, 32, 10], 0)
    assert p.f == 32 and p.feature_layer_index == 1
    assert p.d == 784 * 64 + 64 + 64 * 32 + 32 + 32 * 10 + 10
    np.testing.assert_array_equal(p.with_flat(p.flat()).flat(), p.flat())


def test_layers_must_compose():
    with pytest.raises(ValueError):
        InnerParams([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((5, 2)), np.zeros(2))])


def test_zero_network_gives_uniform_prediction():
    p = _params()
    p = p.with_flat(np.zeros(p.d))
    logits, h = _forward(p, np.random.default_rng(0).standard_normal((5, 6)))
    np.testing.assert_array_equal(logits, 0.0)
    t = Tape()
    probs = t.softmax(t.leaf(logits)).values
    np.testing.assert_allclose(probs, 1 / 3, rtol=0, atol=1e-15)


def test_rows_are_independent():
    p = _params(1)
    x = np.random.default_rng(1).standard_normal((1, 6))
    one, h1 = _forward(p, x)
    two, h2 = _forward(p, np.vstack([x, x]))
    np.testing.assert_array_equal(two[0], two[1])
    np.testing.assert_allclose(two[0], one[0], rtol=0, atol=1e-12)
    assert h2.shape == (2, 4)


def test_forward_matches_matrix_oracle():
    rng = np.random.default_rng(2)
    p = _params(2)
    X = rng.standard_normal((7, 6))
    (w1, b1), (w2, b2), (w3, b3) = p.layers
    h = np.maximum(np.maximum(X @ w1 + b1, 0) @ w2 + b2, 0)
    logits, feats = _forward(p, X)
    np.testing.assert_allclose(feats, h, rtol=0, atol=1e-12)
    np.testing.assert_allclose(logits, h @ w3 + b3, rtol=0, atol=1e-12)
    np.testing.assert_allclose(predict(p, X), logits, rtol=0, atol=1e-12)


def test_forward_input_shape_error():
    p = _params()
    t = Tape()
    with pytest.raises(ValueError, match="does not match first layer"):
        forward(t, p.to_tape(t), t.leaf(np.zeros((2, 5))))


def _gated(p, X, s, A):
    t = Tape()
    logits, hh = gated_forward(t, p.to_tape(t), t.leaf(X), t.leaf(s), t.leaf(A))
    return logits.values, hh.values


def test_zero_gate_is_identity():
    rng = np.random.default_rng(3)
    p = _params(3)
    X = rng.standard_normal((9, 6))
    g_logits, hh = _gated(p, X, 0.37, np.zeros(4))
    logits, h = _forward(p, X)
    np.testing.assert_array_equal(g_logits, logits)
    np.testing.assert_array_equal(hh, h)


def test_gate_of_minus_one_kills_features():
    rng = np.random.default_rng(4)
    p = _params(4)
    _, hh = _gated(p, rng.standard_normal((5, 6)), 0.5, np.full(4, -2.0))
    np.testing.assert_allclose(hh, 0.0, atol=1e-12, rtol=0)


def test_gate_elementwise_oracle():
    rng = np.random.default_rng(5)
    p = _params(5)
    X = rng.standard_normal((6, 6))
    A = rng.standard_normal(4)
    _, h = _forward(p, X)
    _, hh = _gated(p, X, 0.7, A)
    for i in range(6):
        for j in range(4):
            assert abs(hh[i, j] - (1 + 0.7 * A[j]) * h[i, j]) <= 1e-12


def test_gate_length_checked():
    p = _params()
    with pytest.raises(ValueError, match="gate weights"):
        _gated(p, np.zeros((2, 6)), 0.1, np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_zero_gate_equals_plain_forward_property(seed, s):
    rng = np.random.default_rng(seed)
    p = _params(seed % 7)
    X = rng.uniform(-2, 2, (rng.integers(1, 6), 6))
    assert np.array_equal(_gated(p, X, s, np.zeros(4))[0], _forward(p, X)[0])


@pytest.mark.parametrize("seed", range(4))
def test_gate_gradients_match_finite_differences(seed):
    assert suite_gate(seed) < 1e-4


def test_gated_pass_blocks_inner_weights():
    rng = np.random.default_rng(6)
    p = _params(6)
    t = Tape()
    w_nodes = p.to_tape(t, requires_grad=True)
    s, A = t.leaf(0.3, True), t.leaf(rng.standard_normal(4), True)
    logits, _ = gated_forward(t, w_nodes, t.leaf(rng.standard_normal((5, 6))), s, A)
    grads = t.backward(loss(t, logits, rng.integers(0, 3, 5)))
    for w, b in w_nodes:
        assert not np.any(grads[w.id]) and not np.any(grads[b.id])
    assert np.any(grads[A.id]) and grads[s.id] != 0


def test_loss_uniform_logits():
    t = Tape()
    assert abs(loss(t, t.leaf(np.zeros((4, 7))), [0, 1, 2, 6]).item() - math.log(7)) < 1e-15


def test_loss_saturates():
    t = Tape()
    logits = np.full((3, 4), -500.0)
    logits[np.arange(3), [1, 2, 3]] = 500.0
    assert loss(t, t.leaf(logits), [1, 2, 3]).item() < 1e-300


def test_loss_matches_logsumexp_formula():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((6, 5)) * 4
    y = rng.integers(0, 5, 6)
    expected = math.fsum(
        math.log(math.fsum(math.exp(v) for v in row)) - row[c] for row, c in zip(logits, y)) / 6
    t = Tape()
    assert abs(loss(t, t.leaf(logits), y).item() - expected) < 1e-12


def test_loss_label_out_of_range():
    t = Tape()
    with pytest.raises(ValueError):
        loss(t, t.leaf(np.zeros((2, 3))), [0, 5])


def _scalar_params(w0):
    return InnerParams([(np.array([[w0]]), np.zeros(1)), (np.zeros((1, 1)), np.zeros(1))])


def test_sgd_step():
    p = _scalar_params(1.0)
    g = np.zeros(p.d)
    g[0] = 2.0
    p, _ = inner_step(p, OptimizerState("sgd", lr=0.1), g)
    assert p.layers[0][0][0, 0] == pytest.approx(0.8, abs=1e-15)


def test_momentum_two_steps():
    p = _scalar_params(0.0)
    opt = OptimizerState("momentum", lr=0.1, momentum=0.9)
    g = np.zeros(p.d)
    g[0] = 1.0
    trace = [0.0]
    for _ in range(2):
        p, opt = inner_step(p, opt, g)
        trace.append(p.layers[0][0][0, 0])
    assert -np.diff(trace) == pytest.approx([0.1, 0.19], abs=1e-15)


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e4])
def test_adam_first_step_is_lr(scale):
    p = _scalar_params(0.0)
    g = np.zeros(p.d)
    g[0] = scale
    p, _ = inner_step(p, OptimizerState("adam", lr=0.01), g)
    assert abs(p.layers[0][0][0, 0]) == pytest.approx(0.01, rel=1e-3)


def test_non_finite_gradient_aborts():
    p = _scalar_params(0.0)
    g = np.zeros(p.d)
    g[1] = np.nan
    with pytest.raises(NumericError, match="non-finite"):
        inner_step(p, OptimizerState("sgd", lr=0.1), g)


def test_hd_aligned_unit_gradients():
    opt = OptimizerState("sgdhd", lr=0.1, hyper_lr=0.1, prev_grad=np.array([1.0, 0.0]))
    hd_update(opt, np.array([1.0, 0.0]))
    assert opt.lr == 0.2


def test_hd_orthogonal_gradients_keep_lr():
    opt = OptimizerState("sgdhd", lr=0.1, hyper_lr=0.1, prev_grad=np.array([1.0, 0.0]))
    hd_update(opt, np.array([0.0, 3.0]))
    assert opt.lr == 0.1


def test_hd_disabled():
    rng = np.random.default_rng(8)
    opt = OptimizerState("adamhd", lr=0.05, hyper_lr=0.0, prev_grad=rng.standard_normal(5))
    for _ in range(20):
        hd_update(opt, rng.standard_normal(5))
    assert opt.lr == 0.05


def test_hd_needs_previous_gradient():
    with pytest.raises(ValueError):
        hd_update(OptimizerState("sgdhd", lr=0.1), np.ones(2))


def test_hd_anticorrelated_gradients_decrease_lr_to_clamp():
    opt = OptimizerState("sgdhd", lr=0.1, hyper_lr=0.01, prev_grad=np.array([1.0, 1.0]))
    lrs = [opt.lr]
    for k in range(20):
        hd_update(opt, np.array([1.0, 1.0]) * (-1) ** (k + 1))
        lrs.append(opt.lr)
    diffs = np.diff(lrs)
    floor = lrs.index(opt.lr_min)
    assert np.all(diffs[:floor] < 0)
    assert all(v == opt.lr_min for v in lrs[floor:])


def test_inner_step_applies_hd_after_first_step():
    p = _scalar_params(0.0)
    opt = OptimizerState("sgdhd", lr=0.1, hyper_lr=0.1, momentum=0.0)
    g = np.zeros(p.d)
    g[0] = 1.0
    p, opt = inner_step(p, opt, g)
    assert opt.lr == 0.1 and opt.prev_grad is not None
    p, opt = inner_step(p, opt, g)
    assert opt.lr == pytest.approx(0.2)


def test_minibatch_gradient_is_average_of_example_gradients():
    rng = np.random.default_rng(9)
    p = _params(9)
    X = rng.standard_normal((8, 6))
    y = rng.integers(0, 3, 8)
    _, full = loss_and_grad(p, X, y)
    singles = np.mean([loss_and_grad(p, X[i:i + 1], y[i:i + 1])[1] for i in range(8)], axis=0)
    np.testing.assert_allclose(singles, full, atol=1e-12, rtol=0)


def test_loss_and_grad_matches_finite_differences():
    rng = np.random.default_rng(10)
    X = rng.uniform(-1, 1, (5, 6))
    y = rng.integers(0, 3, 5)
    p = _params(10)

    def build(t, xs):
        logits, _ = forward(t, list(zip(xs[0::2], xs[1::2])), t.leaf(X))
        return loss(t, logits, y)

    assert check_tape_function(build, [a.copy() for pair in p.layers for a in pair]) < 1e-4
