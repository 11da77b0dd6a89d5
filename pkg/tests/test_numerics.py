import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal

from findnet.numerics import autodiff as ad, fft, ops
from findnet.numerics.autodiff import backward, grad_check, parameter


# ---------------------------------------------------------------- conv2d

def test_identity_kernel_returns_input(rng):
    x = rng.normal(size=(1, 5, 5))
    out = ops.conv2d(x, np.ones((1, 1, 1, 1)), 0).value
    np.testing.assert_array_equal(out, x)


def test_ones_kernel_sliding_sums():
    out = ops.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), 1).value
    assert out[0, 1, 1] == 9
    assert out[0, 0, 0] == 4
    assert out[0, 0, 2] == 4 and out[0, 2, 0] == 4 and out[0, 2, 2] == 4


def test_conv_output_shape(rng):
    out = ops.conv2d(rng.normal(size=(2, 8, 8)), rng.normal(size=(4, 2, 3, 3)), 1)
    assert out.shape == (4, 8, 8)


def test_conv_matches_scipy_correlate(rng):
    x = rng.normal(size=(1, 3, 9, 7))
    w = rng.normal(size=(2, 3, 5, 5))
    out = ops.conv2d(x, w, 2).value
    ref = np.zeros((1, 2, 9, 7))
    for o in range(2):
        for c in range(3):
            ref[0, o] += signal.correlate2d(x[0, c], w[o, c], mode="same")
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ops.DimensionError):
        ops.conv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 3, 3)), 1)


def test_conv_transpose_scalar_kernel(rng):
    y = rng.normal(size=(1, 6, 6))
    out = ops.conv2d_transpose(y, np.full((1, 1, 1, 1), 2.5), 0).value
    np.testing.assert_allclose(out, 2.5 * y, rtol=0, atol=0)


def test_conv_transpose_zero_input(rng):
    out = ops.conv2d_transpose(np.zeros((3, 6, 6)), rng.normal(size=(3, 1, 3, 3)), 1).value
    assert out.shape == (1, 6, 6) and not out.any()


def test_adjoint_identity_spec_instance(rng):
    x = rng.normal(size=(1, 6, 6))
    K = rng.normal(size=(3, 1, 3, 3))
    y = rng.normal(size=(3, 6, 6))
    lhs = np.sum(ops.conv2d(x, K, 1).value * y)
    rhs = np.sum(x * ops.conv2d_transpose(y, K, 1).value)
    assert abs(lhs - rhs) < 1e-10


@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3, 5]))
def test_adjoint_identity_property(seed, k):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 7, 5))
    K = r.normal(size=(3, 2, k, k))
    y = r.normal(size=(3, 7, 5))
    lhs = np.sum(ops.conv2d(x, K, k // 2).value * y)
    rhs = np.sum(x * ops.conv2d_transpose(y, K, k // 2).value)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# ---------------------------------------------------------------- batch norm

def test_bn_train_normalizes(rng):
    # the output variance is v / (v + eps); the 1e-6 band needs v well above 10 * eps / 1e-6
    x = rng.normal(3.0, 5.0, size=(2, 3, 5, 5))
    out = ops.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True).value
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-8)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-6)
    v = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), v / (v + ops.BN_EPS), rtol=1e-12)


def test_bn_infer_identity_stats(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    out = ops.batch_norm(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), False).value
    np.testing.assert_allclose(out, x, rtol=1e-5)


def test_bn_constant_channel_gives_shift():
    x = np.full((1, 2, 4, 4), 3.7)
    out = ops.batch_norm(x, np.ones(2), np.array([0.25, -1.0]), np.zeros(2), np.ones(2),
                         True).value
    np.testing.assert_array_equal(out[0, 0], 0.25)
    np.testing.assert_array_equal(out[0, 1], -1.0)


def test_bn_updates_running_stats(rng):
    x = rng.normal(2.0, 1.0, size=(1, 1, 8, 8))
    rm, rv = np.zeros(1), np.ones(1)
    ops.batch_norm(x, np.ones(1), np.zeros(1), rm, rv, True)
    assert rm[0] == pytest.approx(0.1 * x.mean())
    assert rv[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


# ---------------------------------------------------------------- FFT

def test_dc_only_spectrum():
    X = fft.fft2(np.full((1, 8, 4), 1.5))
    assert X[0, 0, 0] == pytest.approx(1.5 * 32)
    rest = np.abs(X).ravel()[1:]
    assert np.all(rest < 1e-10)


def test_fft_roundtrip(rng):
    x = rng.normal(size=(1, 8, 8))
    assert np.max(np.abs(fft.ifft2(fft.fft2(x), 8) - x)) < 1e-10


def test_parseval_against_dense_dft(rng):
    H, W = 8, 16
    x = rng.normal(size=(H, W))
    X = fft.fft2(x[None])[0]
    Fh = np.exp(-2j * np.pi * np.outer(np.arange(H), np.arange(H)) / H)
    Fw = np.exp(-2j * np.pi * np.outer(np.arange(W), np.arange(W)) / W)
    dense = Fh @ x @ Fw.T
    np.testing.assert_allclose(X, dense[:, : W // 2 + 1], atol=1e-10)
    weight = np.full(W // 2 + 1, 2.0)
    weight[0] = weight[-1] = 1.0
    energy = np.sum(weight * np.abs(X) ** 2) / (H * W)
    assert abs(energy - np.sum(x * x)) / np.sum(x * x) < 1e-9


def test_fft_rejects_non_power_of_two():
    with pytest.raises(fft.UnsupportedSizeError):
        fft.fft2(np.zeros((1, 6, 8)))


def test_rfft_op_stacks_re_im(rng):
    x = rng.normal(size=(1, 2, 8, 8))
    z = ops.rfft2(x).value
    ref = np.fft.rfft2(x)
    np.testing.assert_array_equal(z[:, :2], ref.real)
    np.testing.assert_array_equal(z[:, 2:], ref.imag)
    np.testing.assert_allclose(ops.irfft2(z, 8).value, x, atol=1e-12)


# ---------------------------------------------------------------- tape

def test_sum_gradient_is_ones(rng):
    x = parameter(rng.normal(size=(3, 4)))
    backward(ops.total(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_relu_gradient_is_indicator():
    v = np.array([-2.0, -0.5, 0.0, 0.3, 4.0])
    x = parameter(v)
    backward(ops.total(ops.relu(x)))
    np.testing.assert_array_equal(x.grad, (v > 0).astype(float))


def test_shared_subexpression_accumulates(rng):
    v = rng.normal(size=5)
    x = parameter(v)
    y = ops.mul(x, x)
    backward(ops.total(ops.add(y, y)))
    np.testing.assert_allclose(x.grad, 4 * v)


def test_backward_rejects_non_scalar(rng):
    with pytest.raises(ad.ContractError):
        backward(ops.relu(parameter(rng.normal(size=3))))


def test_node_ids_increase_along_graph(rng):
    a = parameter(rng.normal(size=2))
    b = ops.exp(a)
    c = ops.add(a, b)
    assert a.id < b.id < c.id
    assert all(i.id < c.id for i in c.inputs)


def test_grad_shapes_match_values(rng):
    x = parameter(rng.normal(size=(1, 2, 4, 4)))
    w = parameter(rng.normal(size=(3, 2, 3, 3)))
    backward(ops.total(ops.square(ops.conv2d(x, w, 1))))
    assert x.grad.shape == x.value.shape and w.grad.shape == w.value.shape


def test_grad_check_quadratic(rng):
    assert grad_check(lambda x: ops.total(ops.square(x)), rng.normal(size=(4, 4))) < 1e-7


def test_grad_check_detects_broken_adjoint(rng):
    x = rng.normal(size=(1, 1, 6, 6))
    w = rng.normal(size=(1, 1, 3, 3))
    f = lambda v: ops.total(ops.square(ops.conv2d(v, w, 1)))  # noqa: E731
    assert grad_check(f, x) < 1e-6
    with ad.break_adjoint("conv2d"):
        assert grad_check(f, x) > 1e-2
    assert grad_check(f, x) < 1e-6


def test_outputs_finite_on_finite_inputs(rng):
    x = rng.normal(size=(1, 2, 8, 8)) * 50
    out = ops.sigmoid(ops.softplus(ops.irfft2(ops.rfft2(x), 8)))
    assert np.all(np.isfinite(out.value))
