import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from diffsep import autodiff as ad
from diffsep.gradcheck import check

finite = st.floats(-3, 3, allow_nan=False, width=64)


def test_backward_accumulates_shared_inputs():
    x = ad.Value(np.array([2.0, -1.0]), requires_grad=True)
    y = ad.sum(x * x + x)
    ad.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_broadcast_gradients_are_reduced():
    a = ad.Value(np.ones((3, 4)), requires_grad=True)
    b = ad.Value(np.ones(4), requires_grad=True)
    ad.backward(ad.sum(a * b))
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, 3.0)


def test_constants_get_no_gradient():
    a = ad.Value(np.ones(3), requires_grad=True)
    c = ad.Value(np.ones(3))
    ad.backward(ad.sum(a * c))
    assert c._grad is None


def test_deep_chain_does_not_recurse():
    x = ad.Value(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    ad.backward(y)
    assert x.grad == pytest.approx(1.0)


@given(arrays(np.float64, (3, 4), elements=finite))
@settings(max_examples=25, deadline=None)
def test_sum_mean_gradients(x):
    v = ad.Value(x, requires_grad=True)
    ad.backward(ad.mean(v))
    np.testing.assert_allclose(v.grad, np.full_like(x, 1 / x.size))


@given(arrays(np.float64, (2, 5), elements=finite), arrays(np.float64, (5, 3), elements=finite))
@settings(max_examples=25, deadline=None)
def test_matmul_matches_numpy(a, b):
    np.testing.assert_allclose(ad.matmul(ad.Value(a), ad.Value(b)).data, a @ b)


def test_conv1d_matches_direct_sum(rng):
    x = rng.standard_normal((2, 3, 11))
    w = rng.standard_normal((4, 3, 5))
    out = ad.conv1d(ad.Value(x), ad.Value(w)).data
    pad = np.pad(x, ((0, 0), (0, 0), (2, 2)))
    ref = np.zeros((2, 4, 11))
    for t in range(11):
        ref[:, :, t] = np.einsum("nck,ock->no", pad[:, :, t:t + 5], w)
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_conv2d_matches_direct_sum(rng):
    x = rng.standard_normal((2, 2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = ad.conv2d(ad.Value(x), ad.Value(w), ad.Value(b)).data
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 6, 7))
    for i in range(6):
        for j in range(7):
            ref[:, :, i, j] = np.einsum("nckl,ockl->no", pad[:, :, i:i + 3, j:j + 3], w) + b
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_conv2d_gradient(rng):
    x = rng.standard_normal((2, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    assert check(lambda x, w: ad.sum(ad.tanh(ad.conv2d(x, w))), [x, w]) < 1e-6


def test_frame_overlap_add_roundtrip(rng):
    x = rng.standard_normal(100)
    frames = ad.frame(ad.Value(x), 16, 16, center=False)
    back = ad.overlap_add(frames, 16, 96).data
    np.testing.assert_allclose(back, x[:96])


def test_rfft_mag_matches_numpy(rng):
    x = rng.standard_normal((3, 32))
    np.testing.assert_allclose(ad.rfft_mag(ad.Value(x)).data, np.abs(np.fft.rfft(x)), atol=1e-10)


def test_straight_through_forward_is_hard():
    soft = ad.Value(np.array([0.2, 0.7]), requires_grad=True)
    out = ad.straight_through(soft, np.array([0.0, 1.0]))
    np.testing.assert_array_equal(out.data, [0.0, 1.0])
    ad.backward(ad.sum(out * np.array([3.0, 5.0])))
    np.testing.assert_array_equal(soft.grad, [3.0, 5.0])


def test_straight_through_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        ad.straight_through(ad.Value(np.ones(3)), np.ones(2))


def test_log_is_shifted_by_eps():
    np.testing.assert_allclose(ad.log(ad.Value(np.zeros(1))).data, np.log(ad.EPS))
