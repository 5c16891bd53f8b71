import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gatedprune import ops
from gatedprune.tensor import Tape, Tensor, TensorError, backward


def _t(a, grad=True):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


def _fd_check(f, arrays, rng, n=6, tol=1e-6):
    """Compare tape gradients of scalar f(*tensors) with central differences."""
    tensors = [_t(a) for a in arrays]
    with Tape() as tape:
        loss = f(*tensors)
    grads = backward(tape, loss)
    for t in tensors:
        g = grads.get(t.id, np.zeros_like(t.data))
        for _ in range(n):
            idx = tuple(rng.integers(0, s) for s in t.shape)
            num = oracles.central_difference(lambda: f(*[Tensor(x.data) for x in tensors]).item(), t.data, idx)
            assert g[idx] == pytest.approx(num, rel=tol, abs=tol)


def test_conv_matches_hand_computed_value():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 2, 2))
    out = ops.conv2d(Tensor(x), Tensor(w)).data
    # each output is the sum of a 2x2 window of 0..8
    np.testing.assert_array_equal(out[0, 0], [[8.0, 12.0], [20.0, 24.0]])


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    k=st.integers(1, 3),
    stride=st.integers(1, 2),
    pad=st.integers(0, 1),
    seed=st.integers(0, 2**16),
)
def test_conv_matches_loop_oracle(n, cin, cout, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    h = k + stride * rng.integers(0, 3) - 2 * pad
    if h < k:
        h += stride * 2
    x = rng.normal(size=(n, cin, h, h))
    w = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    try:
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    except TensorError:
        assert (h + 2 * pad - k) % stride or h + 2 * pad < k
        return
    np.testing.assert_allclose(got, oracles.conv2d(x, w, b, stride, pad), atol=1e-10, rtol=0)


def test_conv_rejects_non_integral_extent():
    with pytest.raises(TensorError, match="not integral"):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(TensorError, match="channel mismatch"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    _fd_check(lambda x, w, b: ops.total(ops.mul(ops.conv2d(x, w, b, 2, 1), ops.conv2d(x, w, b, 2, 1))), [x, w, b], rng)


def test_dense_matches_oracle_and_gradients():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    np.testing.assert_allclose(ops.dense(Tensor(x), Tensor(w), Tensor(b)).data, oracles.dense(x, w, b), atol=1e-12)
    _fd_check(lambda x, w, b: ops.softmax_cross_entropy(ops.dense(x, w, b), [0, 1, 2, 0]), [x, w, b], rng)


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_pool_matches_oracle(mode):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 6, 6))
    for window, stride in [(2, 2), (3, 3), (2, 1), (6, 6)]:
        got = ops.pool2d(Tensor(x), mode, window, stride).data
        np.testing.assert_allclose(got, oracles.pool2d(x, mode, window, stride), atol=1e-12)


def test_max_pool_tie_goes_to_first_element():
    x = _t(np.ones((1, 1, 2, 2)))
    with Tape() as tape:
        y = ops.total(ops.pool2d(x, "max", 2))
    g = backward(tape, y)[x.id]
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_pool_gradients(mode):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 4, 4))
    _fd_check(lambda x: ops.total(ops.mul(ops.pool2d(x, mode, 2), ops.pool2d(x, mode, 2))), [x], rng)


def test_batchnorm_train_matches_oracle_and_updates_running_stats():
    rng = np.random.default_rng(4)
    x = rng.normal(2.0, 3.0, size=(5, 3, 2, 2))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    stats = ops.RunningStats.fresh(3)
    out = ops.batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), stats, "train").data
    ref, mean, var = oracles.batchnorm_train(x, gamma, beta)
    np.testing.assert_allclose(out, ref, atol=1e-10)
    count = 5 * 2 * 2
    np.testing.assert_allclose(stats.mean, 0.1 * mean, atol=1e-12)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * var * count / (count - 1), atol=1e-12)


def test_batchnorm_eval_uses_running_stats():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    stats = ops.RunningStats(rng.normal(size=4), rng.uniform(0.5, 2, size=4))
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    out = ops.batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), stats, "eval").data
    np.testing.assert_allclose(out, oracles.batchnorm_eval(x[:, :, None, None], gamma, beta, stats.mean, stats.var)[:, :, 0, 0], atol=1e-12)


def test_batchnorm_train_needs_two_values():
    with pytest.raises(TensorError, match="at least 2"):
        ops.batchnorm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), ops.RunningStats.fresh(2), "train")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(mode):
    rng = np.random.default_rng(6)
    x, gamma, beta = rng.normal(size=(4, 3, 2, 2)), rng.normal(size=3), rng.normal(size=3)
    w = rng.normal(size=(4, 3, 2, 2))

    def f(x, gamma, beta):
        stats = ops.RunningStats(np.full(3, 0.2), np.full(3, 1.5))
        return ops.total(ops.mul(ops.batchnorm(x, gamma, beta, stats, mode), Tensor(w)))

    _fd_check(f, [x, gamma, beta], rng)


def test_softmax_cross_entropy_matches_oracle_and_is_stable():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(6, 4)) * 5
    labels = rng.integers(0, 4, 6)
    assert ops.softmax_cross_entropy(Tensor(logits), labels).item() == pytest.approx(oracles.softmax_cross_entropy(logits, labels), abs=1e-12)
    big = ops.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [0]).item()
    assert big == pytest.approx(0.0, abs=1e-12)


def test_elementwise_and_scaling_gradients():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 4, 2, 2))
    s = rng.uniform(0.1, 0.9, size=4)
    a = rng.uniform(0.1, 0.9, size=(1,))
    c = rng.normal(size=x.shape)
    _fd_check(lambda x, s, a: ops.total(ops.mul(ops.scalar_scale(ops.channel_scale(ops.relu(x), s), a), Tensor(c))), [x, s, a], rng)


def test_channel_scatter_places_channels_and_routes_gradient():
    x = _t(np.arange(8.0).reshape(1, 2, 2, 2))
    with Tape() as tape:
        y = ops.channel_scatter(x, [0, 2], 3)
        loss = ops.total(ops.mul(y, Tensor(np.arange(12.0).reshape(1, 3, 2, 2))))
    np.testing.assert_array_equal(y.data[0, 1], 0.0)
    np.testing.assert_array_equal(y.data[0, 2], x.data[0, 1])
    g = backward(tape, loss)[x.id]
    np.testing.assert_array_equal(g[0, 1], np.arange(8.0, 12.0).reshape(2, 2))


def test_clamp_passes_gradient_inside_range_only():
    x = _t([-0.5, 0.0, 0.5, 1.0, 1.5])
    with Tape() as tape:
        y = ops.total(ops.clamp(x))
    np.testing.assert_array_equal(backward(tape, y)[x.id], [0, 1, 1, 1, 0])


def test_dropout_identity_in_eval_and_scaled_in_train():
    x = Tensor(np.ones((1000,)))
    assert ops.dropout(x, 0.5, None, "eval") is x
    y = ops.dropout(x, 0.5, np.random.default_rng(0), "train").data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.1


def test_l2_penalty_and_sum_scalars():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=4)
    _fd_check(lambda a, b: ops.sum_scalars([ops.l2_penalty([a, b], 0.3), ops.abs_sum(b)]), [a, b], rng)
    assert ops.sum_scalars([]).item() == 0.0


def test_backward_requires_scalar_and_reports_shape_errors():
    x = _t(np.ones(3))
    with Tape() as tape:
        y = ops.relu(x)
    with pytest.raises(TensorError, match="scalar"):
        backward(tape, y)


def test_no_recording_outside_tape():
    x = _t(np.ones(3))
    with Tape() as tape:
        pass
    y = ops.relu(x)
    assert len(tape) == 0 and not y.requires_grad


def test_leaf_grad_is_set_and_accumulates_over_reuse():
    x = _t([2.0])
    with Tape() as tape:
        y = ops.total(ops.mul(x, x))
    backward(tape, y)
    assert x.grad[0] == pytest.approx(4.0)
