import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from highres3d import ops
from highres3d.tensor import ShapeError, Tensor

from checks import conv_oracle_cases, micro_network_gradient_error, op_gradient_errors
from oracles import loop_conv3d, naive_conv3d


def test_dense_oracle_agrees_with_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 3, 5))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    np.testing.assert_allclose(naive_conv3d(x, w, 2), loop_conv3d(x, w, 2), atol=1e-10)


def test_dilated_conv_matches_zero_inflated_kernel():
    worst = max(np.abs(got - want).max() for got, want in conv_oracle_cases(120))
    assert worst <= 1e-5


def test_conv_r1_known_values():
    # a single centred tap copies the input; an all-ones kernel sums 3x3x3 neighbourhoods
    x = np.arange(27, dtype=np.float64).reshape(1, 3, 3, 3)
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1
    np.testing.assert_array_equal(ops.conv3d_forward(x, w), x)
    assert ops.conv3d_forward(x, np.ones((1, 1, 3, 3, 3)))[0, 1, 1, 1] == x.sum()


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 3, 4]), st.integers(1, 3), st.integers(1, 3),
       st.tuples(st.integers(2, 9), st.integers(2, 9), st.integers(2, 9)), st.integers(0, 2 ** 16))
def test_conv_methods_agree(r, c, o, shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c,) + shape).astype(np.float32)
    w = rng.normal(size=(o, c, 3, 3, 3)).astype(np.float32)
    ref = ops.conv3d_forward(x, w, r, method="direct")
    for method in ("gemm", "split"):
        np.testing.assert_allclose(ops.conv3d_forward(x, w, r, method=method), ref, atol=1e-5)


def test_valid_padding_shrinks_by_kernel_span():
    x = np.ones((1, 11, 11, 11))
    w = np.ones((1, 1, 3, 3, 3))
    assert ops.conv3d_forward(x, w, 2, "valid").shape == (1, 7, 7, 7)
    assert ops.conv3d_forward(x, w, 4, "valid").shape == (1, 3, 3, 3)
    with pytest.raises(ShapeError):
        ops.conv3d_forward(np.ones((1, 8, 8, 8)), w, 4, "valid")


@pytest.mark.parametrize("bad", [
    lambda: ops.conv3d_forward(np.ones((2, 4, 4, 4)), np.ones((1, 3, 3, 3, 3))),
    lambda: ops.conv3d_forward(np.ones((1, 4, 4, 4)), np.ones((1, 1, 2, 2, 2))),
    lambda: ops.conv3d_forward(np.ones((4, 4, 4)), np.ones((1, 1, 3, 3, 3))),
])
def test_conv_shape_errors(bad):
    with pytest.raises(ShapeError):
        bad()


def test_conv_rejects_bad_dilation_and_method():
    with pytest.raises(ValueError):
        ops.conv3d_forward(np.ones((1, 4, 4, 4)), np.ones((1, 1, 3, 3, 3)), 0)
    with pytest.raises(ValueError):
        ops.conv3d_forward(np.ones((1, 4, 4, 4)), np.ones((1, 1, 3, 3, 3)), method="fft")


def test_layer_op_gradients():
    for name, (err, tol) in op_gradient_errors().items():
        assert err <= tol, f"{name}: {err:.2e}"


def test_micro_network_gradients():
    assert micro_network_gradient_error() <= 1e-5


def test_batchnorm_train_statistics():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(2, 6, 6, 6))
    sink = []
    y = ops.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, None, "train", stats_out=sink)
    np.testing.assert_allclose(y.data.mean(axis=(1, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.data.var(axis=(1, 2, 3)), 1, atol=1e-4)
    np.testing.assert_allclose(sink[0].mean, x.mean(axis=(1, 2, 3)))
    np.testing.assert_allclose(sink[0].var, x.reshape(2, -1).var(axis=1, ddof=1))


def test_batchnorm_inference_uses_running_values():
    x = np.full((1, 2, 2, 2), 5.0)
    y = ops.batchnorm(Tensor(x), Tensor(np.array([2.0])), Tensor(np.array([1.0])),
                      np.array([3.0]), np.array([4.0]), "inference")
    np.testing.assert_allclose(y.data, 2.0 * (5 - 3) / np.sqrt(4 + ops.BN_EPS) + 1)


def test_running_average_update():
    m, v = ops.update_running(np.zeros(2), np.ones(2), ops.BatchStats(np.array([1.0, 2.0]), np.array([3.0, 5.0])))
    np.testing.assert_allclose(m, [0.1, 0.2])
    np.testing.assert_allclose(v, [1.2, 1.4])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.floats(-50, 50), st.integers(0, 1000))
def test_softmax_is_a_distribution_and_shift_invariant(c, shift, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(c, 3, 2, 2))
    s = ops.softmax_channels(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=0), 1, atol=1e-12)
    assert (s >= 0).all()
    np.testing.assert_allclose(ops.softmax_channels(Tensor(x + shift)).data, s, atol=1e-12)


def test_dropout_statistics_and_identity_cases():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((4, 20, 20, 20)))
    y = ops.dropout(x, 0.5, rng).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs((y > 0).mean() - 0.5) < 0.02
    assert abs(y.mean() - 1.0) < 0.04
    assert ops.dropout(x, 1.0, rng) is x
    assert ops.dropout(x, 0.5, None) is x
    with pytest.raises(ValueError):
        ops.dropout(x, 0.0, rng)


def test_residual_skip_gradient_is_exact():
    rng = np.random.default_rng(0)
    skip = Tensor(rng.normal(size=(2, 3, 3, 3)).astype(np.float32), requires_grad=True)
    branch = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
    out = ops.residual_add(skip, branch)
    np.testing.assert_array_equal(out.data[:2], skip.data + branch.data[:2])
    np.testing.assert_array_equal(out.data[2:], branch.data[2:])
    g = rng.normal(size=out.shape).astype(np.float32)
    out.backward(g)
    np.testing.assert_array_equal(skip.grad, g[:2])
    np.testing.assert_array_equal(branch.grad, g)
    with pytest.raises(ShapeError):
        ops.residual_add(branch, skip)
