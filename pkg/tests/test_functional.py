import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvmsr import functional as F
from dvmsr.autodiff import Tensor
from dvmsr.functional import ConfigError

from conftest import gradcheck, tparam


def conv2d_oracle(x, w, b, pad, stride=1):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[a, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[a, o, i, j] = acc
    return out


def test_conv2d_dirac_is_identity(rng):
    x = rng.normal(size=(1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    y = F.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), padding=1)
    assert np.array_equal(y.data, x)


def test_conv2d_pointwise_affine():
    y = F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.array([0.5])))
    assert np.array_equal(y.data, np.full((1, 1, 2, 2), 2.5))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_matches_loop_oracle(rng, stride, pad):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    assert np.max(np.abs(y.data - conv2d_oracle(x, w, b, pad, stride))) < 1e-12


def test_conv2d_channel_mismatch():
    with pytest.raises(ConfigError):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradient(rng, stride):
    x, w, b = tparam(rng, 2, 2, 5, 4), tparam(rng, 3, 2, 3, 3), tparam(rng, 3)
    assert gradcheck(lambda: F.conv2d(x, w, b, stride=stride, padding=1), [x, w, b]) < 1e-4


def conv1d_oracle(x, w, b):
    n, length, d = x.shape
    k = w.shape[1]
    out = np.zeros_like(x)
    for a in range(n):
        for t in range(length):
            for c in range(d):
                acc = b[c]
                for j in range(k):
                    src = t - (k - 1) + j
                    if src >= 0:
                        acc += w[c, j] * x[a, src, c]
                out[a, t, c] = acc
    return out


def test_conv1d_k1_identity(rng):
    x = rng.normal(size=(2, 5, 3))
    y = F.conv1d_causal(Tensor(x), Tensor(np.ones((3, 1))), Tensor(np.zeros(3)))
    assert np.array_equal(y.data, x)


def test_conv1d_current_tap_only():
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)
    y = F.conv1d_causal(Tensor(x), Tensor(np.array([[0.0, 0.0, 1.0]])), Tensor(np.zeros(1)))
    assert np.array_equal(y.data.ravel(), [1.0, 2.0, 3.0])


def test_conv1d_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 7, 4))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    y = F.conv1d_causal(Tensor(x), Tensor(w), Tensor(b))
    assert np.max(np.abs(y.data - conv1d_oracle(x, w, b))) < 1e-12


def test_conv1d_is_causal(rng):
    x = rng.normal(size=(1, 9, 2))
    w, b = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=2))
    base = F.conv1d_causal(Tensor(x), w, b).data
    x2 = x.copy()
    x2[0, 5] += 1.0
    moved = F.conv1d_causal(Tensor(x2), w, b).data
    assert np.array_equal(moved[0, :5], base[0, :5])
    assert not np.array_equal(moved[0, 5], base[0, 5])


def test_conv1d_gradient(rng):
    x, w, b = tparam(rng, 2, 6, 3), tparam(rng, 3, 4), tparam(rng, 3)
    assert gradcheck(lambda: F.conv1d_causal(x, w, b), [x, w, b]) < 1e-4


def test_linear_identity_and_hand_case(rng):
    x = rng.normal(size=(2, 3, 4))
    assert np.array_equal(F.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    y = F.linear(Tensor(np.array([1.0, 2.0])), Tensor(np.array([[1.0, 1.0], [1.0, -1.0]])), Tensor(np.array([0.0, 1.0])))
    assert np.array_equal(y.data, [3.0, 0.0])


def test_linear_matches_loop_oracle(rng):
    x = rng.normal(size=(3, 5, 4))
    w = rng.normal(size=(6, 4))
    b = rng.normal(size=6)
    ref = np.zeros((3, 5, 6))
    for i in range(3):
        for t in range(5):
            for o in range(6):
                ref[i, t, o] = b[o] + sum(x[i, t, k] * w[o, k] for k in range(4))
    assert np.max(np.abs(F.linear(Tensor(x), Tensor(w), Tensor(b)).data - ref)) < 1e-12


def test_linear_gradient(rng):
    x, w, b = tparam(rng, 2, 3, 4), tparam(rng, 5, 4), tparam(rng, 5)
    assert gradcheck(lambda: F.linear(x, w, b), [x, w, b]) < 1e-4
    assert gradcheck(lambda: F.linear(x, w), [x, w]) < 1e-4


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    y = F.layer_norm(Tensor(np.full((1, 4), 5.0)), one, zero)
    assert np.array_equal(y.data, np.zeros((1, 4)))
    y = F.layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    assert np.array_equal(y.data, [[1.0, -1.0]])


def test_layer_norm_matches_definition(rng):
    x = rng.normal(size=(3, 7)) * 3 + 1
    g, b = rng.normal(size=7), rng.normal(size=7)
    y = F.layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=1e-5).data
    for row, out in zip(x, y):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        ref = [(v - mu) / np.sqrt(var + 1e-5) * gi + bi for v, gi, bi in zip(row, g, b)]
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2**31 - 1))
def test_layer_norm_moments(d, seed):
    x = np.random.default_rng(seed).normal(size=(4, d)) * 10
    y = F.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=0.0).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-10)
    assert np.all(np.abs(y.var(axis=-1) - 1.0) < 1e-8)


def test_layer_norm_gradient(rng):
    x, g, b = tparam(rng, 2, 3, 5), tparam(rng, 5), tparam(rng, 5)
    assert gradcheck(lambda: F.layer_norm(x, g, b), [x, g, b]) < 1e-4


def test_pixel_shuffle_definition():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
    assert np.array_equal(F.pixel_shuffle(x, 2).data, [[[[1.0, 2.0], [3.0, 4.0]]]])


def test_pixel_shuffle_index_oracle(rng):
    r, c, h, w = 3, 2, 2, 4
    x = rng.normal(size=(1, c * r * r, h, w))
    y = F.pixel_shuffle(Tensor(x), r).data
    for ch in range(c):
        for i in range(r):
            for j in range(r):
                np.testing.assert_array_equal(y[0, ch, i::r, j::r], x[0, ch * r * r + i * r + j])


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([2, 3, 4]), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_pixel_shuffle_bijection(r, c, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(2, c * r * r, h, w))
    assert np.array_equal(F.pixel_unshuffle(F.pixel_shuffle(Tensor(x), r), r).data, x)


def test_pixel_shuffle_divisibility():
    with pytest.raises(ConfigError):
        F.pixel_shuffle(Tensor(np.zeros((1, 5, 2, 2))), 2)


def test_pixel_shuffle_gradient(rng):
    x = tparam(rng, 1, 8, 2, 3)
    assert gradcheck(lambda: F.pixel_shuffle(x, 2), [x]) < 1e-4


def test_hadamard_and_add(rng):
    a, b = tparam(rng, 3, 4), tparam(rng, 3, 4)
    np.testing.assert_array_equal(F.hadamard(a, b).data, a.data * b.data)
    np.testing.assert_array_equal(F.add(a, b).data, a.data + b.data)
    assert gradcheck(lambda: F.hadamard(a, b), [a, b]) < 1e-4
    with pytest.raises(ConfigError):
        F.hadamard(a, tparam(rng, 4, 3))
